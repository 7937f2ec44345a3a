"""Multistatic response synthesis, MUSIC localisation and classification.

The K x L response matrix couples receiver coils (positions r_k, moment q)
to source coils (positions s_l, moment p) through the objects' MPTs:

    A0_kl = sum_n (D2G(r_k, z_n) q) . (M_n D2G(z_n, s_l) p)

Noise follows the additive model A = A0 + (S_noise / sqrt(L)) Wt with
Wt = (W + iW) / sqrt(2) and W i.i.d. standard Gaussian, S_noise referenced
to a chosen singular value of A0.  Gaussians come from numpy's PCG64
generator (ziggurat sampling), so a fixed seed reproduces A bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Scene
from .forward import _object_mpt, d2g


@dataclass(frozen=True)
class CoilArray:
    """Receiver and source coil layout with shared moments per side."""

    receiver_positions: np.ndarray   # (K, 3)
    source_positions: np.ndarray     # (L, 3)
    q: np.ndarray                    # receiver moment
    p: np.ndarray                    # source moment

    def __post_init__(self):
        r = np.asarray(self.receiver_positions, float).reshape(-1, 3)
        s = np.asarray(self.source_positions, float).reshape(-1, 3)
        q = np.asarray(self.q, float).reshape(3)
        p = np.asarray(self.p, float).reshape(3)
        if len(r) < 1 or len(s) < 1:
            raise ValueError("need at least one receiver and one source")
        for name, arr in (("receiver", r), ("source", s)):
            d2 = ((arr[:, None, :] - arr[None, :, :]) ** 2).sum(axis=2)
            np.fill_diagonal(d2, np.inf)
            if d2.min() <= 0:
                raise ValueError(f"duplicate {name} positions")
        if np.linalg.norm(q) == 0 or np.linalg.norm(p) == 0:
            raise ValueError("coil moments must be non-zero")
        for a in (r, s, q, p):
            a.flags.writeable = False
        object.__setattr__(self, "receiver_positions", r)
        object.__setattr__(self, "source_positions", s)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def K(self):
        return len(self.receiver_positions)

    @property
    def L(self):
        return len(self.source_positions)


def grid_coil_array(n_per_side=16, half_width=1.0, height=0.0,
                    p=(0, 0, 1), q=(0, 0, 1)) -> CoilArray:
    """Coincident receiver/source grids on the plane z = height."""
    u = np.linspace(-half_width, half_width, n_per_side)
    X, Y = np.meshgrid(u, u, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), np.full(X.size, height)], axis=1)
    return CoilArray(pos, pos.copy(), q=q, p=p)


@dataclass(frozen=True)
class MsrMatrix:
    A: np.ndarray                # (K, L) complex
    frequency_hz: float
    coils: CoilArray
    s_noise: float = 0.0
    noise_level: float = 0.0
    reference_index: int = 0     # 1-based singular index; 0 = noiseless
    seed: int = None

    def __post_init__(self):
        A = np.asarray(self.A, complex)
        if A.shape != (self.coils.K, self.coils.L):
            raise ValueError("MSR dimensions do not match the coil array")
        if not np.all(np.isfinite(A.view(float))):
            raise ValueError("MSR entries must be finite")
        A = A.copy()
        A.flags.writeable = False
        object.__setattr__(self, "A", A)

    def singular_values(self):
        return np.linalg.svd(self.A, compute_uv=False)


def _receiver_steering(z, coils):
    """(K, 3) matrix with rows D2G(r_k, z) q."""
    return _batch_d2g_dot(coils.receiver_positions, z, coils.q)


def _source_steering(z, coils):
    """(L, 3) matrix with rows D2G(z, s_l) p."""
    return _batch_d2g_dot(coils.source_positions, z, coils.p)


def _batch_d2g_dot(points, z, moment):
    # D2G(a, b) is even in a - b, so one orientation serves both sides
    d = points - np.asarray(z, float)
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist == 0):
        raise ValueError("steering point coincides with a coil position")
    rh = d / dist[:, None]
    proj = rh @ moment
    out = (3.0 * proj[:, None] * rh - moment[None, :]) / (4.0 * np.pi * dist**3)[:, None]
    return out


def _steering_blocks(positions, coils):
    """U (K x 3N) and V (3N x L) evaluated at the given object positions."""
    N = len(positions)
    U = np.empty((coils.K, 3 * N))
    V = np.empty((3 * N, coils.L))
    for n, z in enumerate(positions):
        U[:, 3 * n:3 * n + 3] = _receiver_steering(z, coils)
        V[3 * n:3 * n + 3, :] = _source_steering(z, coils).T
    return U, V


def build_msr(scene: Scene, coils: CoilArray, frequency_hz) -> MsrMatrix:
    """Noiseless A0 from the leading-order coupling formula."""
    positions = []
    blocks = []
    for i, obj in enumerate(scene.objects):
        for name, pts in (("receiver", coils.receiver_positions),
                          ("source", coils.source_positions)):
            if np.min(np.linalg.norm(pts - obj.z, axis=1)) <= obj.alpha:
                raise ValueError(f"a {name} coil lies inside object {i}")
        positions.append(obj.z)
        blocks.append(np.asarray(_object_mpt(obj, frequency_hz), complex))
    U, V = _steering_blocks(positions, coils)
    A = np.zeros((coils.K, coils.L), dtype=complex)
    for n, M in enumerate(blocks):
        A += U[:, 3 * n:3 * n + 3] @ M @ V[3 * n:3 * n + 3, :]
    return MsrMatrix(A=A, frequency_hz=frequency_hz, coils=coils)


def add_noise(a0: MsrMatrix, noise_level, reference_index, seed) -> MsrMatrix:
    """A = A0 + (S_noise / sqrt(L)) (W + iW) / sqrt(2), S_noise from S_ref(A0)."""
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    K, L = a0.A.shape
    if not 1 <= reference_index <= min(K, L):
        raise ValueError(f"reference_index must be in [1, {min(K, L)}]")
    if noise_level == 0:
        return MsrMatrix(A=a0.A, frequency_hz=a0.frequency_hz, coils=a0.coils,
                         s_noise=0.0, noise_level=0.0,
                         reference_index=reference_index, seed=seed)
    s = a0.singular_values()
    s_ref = float(s[reference_index - 1])
    if s_ref <= np.finfo(float).tiny * max(1.0, float(s[0])):
        raise ValueError(
            f"reference singular value S_{reference_index} is numerically zero"
        )
    s_noise = noise_level * s_ref
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((K, L))
    A = a0.A + (s_noise / np.sqrt(L)) * (W + 1j * W) / np.sqrt(2.0)
    return MsrMatrix(A=A, frequency_hz=a0.frequency_hz, coils=a0.coils,
                     s_noise=s_noise, noise_level=float(noise_level),
                     reference_index=reference_index, seed=seed)


@dataclass(frozen=True)
class ObjectCountEstimate:
    n_hat: int
    n_signal_values: int
    gap_ratio: float
    found_gap: bool


def estimate_object_count(msr: MsrMatrix, gap_threshold=10.0) -> ObjectCountEstimate:
    """Objects = (singular values before the largest ratio gap) / 3, rounded down."""
    s = msr.singular_values()
    if s[0] == 0:
        raise ValueError("MSR matrix is zero")
    floor = s[0] * np.finfo(float).eps
    ratios = s[:-1] / np.maximum(s[1:], floor)
    best = int(np.argmax(ratios))
    if ratios[best] <= gap_threshold:
        return ObjectCountEstimate(0, 0, float(ratios.max()), False)
    n_signal = best + 1
    return ObjectCountEstimate(n_signal // 3, n_signal, float(ratios[best]), True)


def music_image(msr: MsrMatrix, grid_points, n_objects, skip_tol=1e-9):
    """MUSIC imaging functional over trial points.

    The noise-subspace projector is built from the right singular vectors of
    A beyond the first 3 * n_objects (source-side steering vectors live in
    C^L).  Steering vector g_i(z) collects D2G(z, s_l) p . e_i over sources.
    Returns (values, flags); a trial point coinciding with a source is
    skipped with value NaN and its flag set.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    coils = msr.coils
    if 3 * n_objects >= min(coils.K, coils.L):
        raise ValueError("3 * n_objects must be below min(K, L)")
    _, _, Vh = np.linalg.svd(msr.A)
    Vs = Vh.conj().T[:, :3 * n_objects]              # (L, 3N)

    pts = np.asarray(grid_points, float).reshape(-1, 3)
    values = np.empty(len(pts))
    flags = np.zeros(len(pts), dtype=bool)
    src = coils.source_positions
    for i, z in enumerate(pts):
        if np.min(np.linalg.norm(src - z, axis=1)) < skip_tol:
            values[i] = np.nan
            flags[i] = True
            continue
        G = _source_steering(z, coils)               # (L, 3), real
        PG = G - Vs @ (Vs.conj().T @ G)
        values[i] = 1.0 / np.sqrt(np.sum(np.abs(PG) ** 2))
    return values, flags


def music_peaks(grid_points, values, n_peaks, min_separation=0.0):
    """Locations of the n_peaks largest values, greedily separated."""
    pts = np.asarray(grid_points, float).reshape(-1, 3)
    order = np.argsort(np.nan_to_num(values, nan=-np.inf))[::-1]
    peaks = []
    for i in order:
        if len(peaks) == n_peaks:
            break
        z = pts[i]
        if all(np.linalg.norm(z - p[0]) > min_separation for p in peaks):
            peaks.append((z, float(values[i])))
    return peaks


# ---------------------------------------------------------------------------
# least-squares MPT recovery
# ---------------------------------------------------------------------------

_SYM_BASIS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


def recover_mpts(msr: MsrMatrix, positions, rcond_limit=1e-10):
    """Least-squares recovery of symmetric per-object MPTs from one MSR matrix.

    Symmetry is imposed as a hard constraint (6 complex unknowns per object).
    Returns (tensors, report) with per-object 3x3 arrays; the report carries
    the residual and the design condition number.  A rank-deficient design
    (coil layout blind to some tensor direction) raises with the unobservable
    combinations listed.
    """
    from .core import ComplexTensor2

    positions = [np.asarray(z, float) for z in positions]
    N = len(positions)
    if N < 1:
        raise ValueError("need at least one object position")
    coils = msr.coils
    U, V = _steering_blocks(positions, coils)

    cond_u = np.linalg.cond(U.T @ U)
    cond_v = np.linalg.cond(V @ V.T)

    design = np.empty((coils.K * coils.L, 6 * N))
    col = 0
    for n in range(N):
        Un = U[:, 3 * n:3 * n + 3]
        Vn = V[3 * n:3 * n + 3, :]
        for (i, j) in _SYM_BASIS:
            E = np.zeros((3, 3))
            E[i, j] = 1.0
            E[j, i] = 1.0
            design[:, col] = (Un @ E @ Vn).ravel()
            col += 1

    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] < rcond_limit * sv[0]:
        _, _, Vh = np.linalg.svd(design)
        null = Vh[np.sum(sv >= rcond_limit * sv[0]):]
        raise ValueError(
            "coil geometry cannot observe all tensor components; "
            f"unobservable coefficient combinations:\n{np.round(null, 4)}"
        )

    rhs = msr.A.ravel()
    coef, res, _, _ = np.linalg.lstsq(design, rhs, rcond=None)
    fitted = design @ coef
    residual = float(np.linalg.norm(rhs - fitted) / max(np.linalg.norm(rhs), 1e-300))

    tensors = []
    for n in range(N):
        T = np.zeros((3, 3), dtype=complex)
        for m, (i, j) in enumerate(_SYM_BASIS):
            T[i, j] = coef[6 * n + m]
            T[j, i] = coef[6 * n + m]
        tensors.append(ComplexTensor2(T))
    report = {
        "residual": residual,
        "cond_UtU": float(cond_u),
        "cond_VVt": float(cond_v),
    }
    return tensors, report


# ---------------------------------------------------------------------------
# dictionary classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dictionary:
    """Named spectral-signature feature vectors on a shared frequency grid.

    Each entry is the concatenated (lambda_R, lambda_I) triples over the
    grid, divided by its own max absolute component, so every entry has max
    |component| = 1.  n0 per entry is kept so on-line features of a target
    can be formed under each candidate hypothesis.
    """

    frequencies_hz: np.ndarray
    names: tuple
    features: np.ndarray          # (n_entries, 6 * n_freq)
    n0: tuple                     # per-entry 3x3 real arrays

    def __post_init__(self):
        f = np.asarray(self.frequencies_hz, float)
        feats = np.asarray(self.features, float)
        if feats.shape != (len(self.names), 6 * len(f)):
            raise ValueError("feature block shape mismatch")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate entry names")
        maxes = np.abs(feats).max(axis=1)
        if np.any(np.abs(maxes - 1.0) > 1e-12):
            raise ValueError("entries must be normalised to max |component| = 1")
        f.flags.writeable = False
        feats.flags.writeable = False
        object.__setattr__(self, "frequencies_hz", f)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "n0", tuple(np.asarray(a, float) for a in self.n0))


def signature_features(lambda_R, lambda_I):
    """Concatenate and self-normalise eigenvalue triples over a sweep."""
    raw = np.concatenate([np.asarray(lambda_R, float).ravel(),
                          np.asarray(lambda_I, float).ravel()])
    m = np.abs(raw).max()
    if m == 0:
        raise ValueError("all-zero signature cannot be normalised")
    return raw / m


def _classifier_lambdas(tensors, n0):
    """Per-frequency eigenvalue features of one object for classification.

    lambda_R is formed as eigs(Re M) - eigs(N0), both sorted ascending.  For
    an object in its own frame where Re M and N0 share principal axes this
    equals the spectrum of Re(M - N0); unlike that spectrum it is invariant
    under rotations of the target, which the matching stage requires because
    the target orientation is unknown.
    """
    n0_eigs = np.linalg.eigvalsh(np.asarray(n0, float))
    lam_R = np.stack([np.linalg.eigvalsh(np.asarray(T).real) - n0_eigs
                      for T in tensors])
    lam_I = np.stack([np.linalg.eigvalsh(np.asarray(T).imag) for T in tensors])
    return lam_R, lam_I


def dictionary_build(candidates, frequencies_hz, signatures=None) -> Dictionary:
    """Off-line stage: spectral features of canonicalised candidates.

    candidates: list of (name, CanonicalObject); each is swept with its
    canonical size on the shared grid.  ``signatures`` may carry precomputed
    SpectralSignature objects keyed by name (their grid must match).
    """
    from .mpt import sweep_spectra

    freqs = np.asarray(frequencies_hz, float)
    names, feats, n0s = [], [], []
    for name, canon in candidates:
        if name in names:
            raise ValueError(f"duplicate candidate name {name!r}")
        inst = canon.instance
        sig = None if signatures is None else signatures.get(name)
        if sig is None:
            sig = sweep_spectra(inst.shape_mesh, inst.materials, inst.alpha, freqs)
        elif len(sig.frequencies) != len(freqs) or \
                not np.allclose(sig.frequencies, freqs):
            raise ValueError(f"signature grid for {name!r} does not match")
        n0 = inst.alpha**3 * canon.n0_unit.entries.real
        lam_R, lam_I = _classifier_lambdas(
            [r.M.entries for r in sig.records], n0)
        names.append(name)
        feats.append(signature_features(lam_R, lam_I))
        n0s.append(n0)
    return Dictionary(frequencies_hz=freqs, names=tuple(names),
                      features=np.stack(feats), n0=tuple(n0s))


def dictionary_match(recovered_tensors, dictionary: Dictionary,
                     frequencies_hz=None):
    """On-line stage: rank candidates by feature distance to the target.

    recovered_tensors: per-frequency 3x3 complex MPTs of one target on the
    dictionary grid.  For each candidate hypothesis the target's lambda_R
    uses that candidate's N0 (the magnetostatic part is not observable from
    the data alone).  Returns [(name, distance)] sorted ascending.
    """
    if frequencies_hz is not None:
        f = np.asarray(frequencies_hz, float)
        if f.shape != dictionary.frequencies_hz.shape or \
                not np.allclose(f, dictionary.frequencies_hz):
            raise ValueError("target frequencies do not match the dictionary grid")
    tensors = [np.asarray(getattr(t, "entries", t), complex)
               for t in recovered_tensors]
    if len(tensors) != len(dictionary.frequencies_hz):
        raise ValueError("one recovered tensor per dictionary frequency required")

    results = []
    for name, feat, n0 in zip(dictionary.names, dictionary.features, dictionary.n0):
        lam_R, lam_I = _classifier_lambdas(tensors, n0)
        target = signature_features(lam_R, lam_I)
        results.append((name, float(np.linalg.norm(feat - target))))
    results.sort(key=lambda t: t[1])
    return results


def dictionary_to_json(dictionary: Dictionary) -> str:
    doc = {
        "frequencies_hz": dictionary.frequencies_hz.tolist(),
        "entries": [
            {"name": n, "features": f.tolist(), "n0": np.asarray(a).tolist()}
            for n, f, a in zip(dictionary.names, dictionary.features,
                               dictionary.n0)
        ],
    }
    return json.dumps(doc, indent=1)


def dictionary_from_json(text) -> Dictionary:
    doc = json.loads(text)
    names = [e["name"] for e in doc["entries"]]
    feats = np.array([e["features"] for e in doc["entries"]], dtype=float)
    n0 = tuple(np.array(e["n0"], dtype=float) for e in doc["entries"])
    return Dictionary(frequencies_hz=np.asarray(doc["frequencies_hz"], float),
                      names=tuple(names), features=feats, n0=n0)
