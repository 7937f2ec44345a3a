"""Polarizability tensors from edge-element solves, and their spectral features.

The tensor pair (C, N) is integrated exactly from the per-element edge
interpolant; M = -C + N.  The omega -> 0 tensor N0 reuses the identical
integration path on the nu = 0 solve.  The analytic conducting permeable
sphere supplies an independent oracle for every sign convention here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import spherical_jn

from .core import MU0, ComplexTensor2, Material, ObjectInstance
from .fem import (TransmissionProblem, assemble, element_geometry,
                  element_moment_vectors, evaluate_curl, solve,
                  solve_theta_zero)
from .mesh import TetMesh, region_volume

# nu at which the high-conductivity limit is evaluated for canonical scaling
# of objects without permeability contrast
NU_HIGH_CONDUCTIVITY = 1.0e6


@dataclass(frozen=True)
class MptRecord:
    """One frequency point: M = -C + N plus bookkeeping."""

    frequency_hz: float
    omega: float
    alpha: float
    M: ComplexTensor2
    C: ComplexTensor2
    N: ComplexTensor2
    nu: tuple
    asymmetry_norm: float
    N0: ComplexTensor2 = None


@dataclass(frozen=True)
class SpectralSignature:
    """Sorted eigenvalue triples of R = Re(M - N0) and I = Im(M) per frequency."""

    frequencies: np.ndarray     # ascending, Hz
    lambda_R: np.ndarray        # (n_f, 3), ascending within each row
    lambda_I: np.ndarray        # (n_f, 3)
    normalization: float        # max |lambda| over the sweep
    records: tuple = field(default=(), repr=False)


def materials_dict(materials):
    """Map a per-region list of materials to {tag: Material} with tags 1..N."""
    if isinstance(materials, dict):
        return {int(t): m for t, m in materials.items()}
    return {i + 1: m for i, m in enumerate(materials)}


def _region_tables(mesh, materials, alpha, omega):
    mats = materials_dict(materials)
    tags = [int(t) for t in mesh.region_tags() if t != 0]
    missing = [t for t in tags if t not in mats]
    if missing:
        raise ValueError(f"no material given for region tags {missing}")
    mu_r = {0: 1.0}
    nu = {0: 0.0}
    for t in tags:
        mu_r[t] = float(mats[t].mu_r)
        nu[t] = omega * MU0 * mats[t].sigma * alpha**2
    return mu_r, nu, tags


def transmission_problem(mesh, materials, alpha, omega,
                         eps_reg=None) -> TransmissionProblem:
    mu_r, nu, _ = _region_tables(mesh, materials, alpha, omega)
    return TransmissionProblem(mesh, mu_r, nu, eps_reg)


def _second_moments(mesh, tag):
    """Exact integrals of xi_i xi_j and the region volume over one tag."""
    geom = element_geometry(mesh)
    idx = mesh.tets_with_tag(tag)
    p = geom.points[idx]
    V = geom.volumes[idx]
    s = p.sum(axis=1)
    Q = np.einsum("m,mi,mj->ij", V / 20.0, s, s)
    Q += np.einsum("m,mpi,mpj->ij", V / 20.0, p, p)
    return Q, float(V.sum())


def compute_mpt(theta_solutions, mesh, materials, alpha, omega,
                frequency_hz=None) -> MptRecord:
    """Integrate C and N from the three solved fields and form M = -C + N.

    The conduction term uses the exact quadratic moment of the edge
    interpolant; the permeability term uses the exact per-tet curl.  M is
    symmetrised on construction with the raw asymmetry recorded.
    """
    if len(theta_solutions) != 3:
        raise ValueError("need the three solutions k = 1, 2, 3")
    for s in theta_solutions:
        if len(s.coefficients) != mesh.n_edges:
            raise ValueError("solution does not match mesh (edge count differs)")

    mu_r, nu, tags = _region_tables(mesh, materials, alpha, omega)
    mom = element_moment_vectors(mesh)
    signs = mesh.tet_edge_signs

    coef = np.stack(
        [s.coefficients[mesh.tet_edges] * signs for s in theta_solutions],
        axis=2,
    )  # (M, 6, 3) over k

    C = np.zeros((3, 3), dtype=complex)
    N = np.zeros((3, 3), dtype=complex)
    for t in tags:
        idx = mesh.tets_with_tag(t)
        # int_B e_j . (xi x theta_k)  =  int_B (e_j x xi) . theta_k
        mom_theta = np.einsum("mek,mej->jk", coef[idx], mom[idx])
        Q, vol = _second_moments(mesh, t)
        q = np.eye(3) * np.trace(Q) - Q
        C += -0.25j * alpha**3 * nu[t] * (mom_theta + q)

        curls = np.stack(
            [evaluate_curl(s, mesh, t) for s in theta_solutions], axis=2
        )  # (m, j, k)
        curl_int = np.einsum("m,mjk->jk", mesh.volumes[idx], curls)
        N += alpha**3 * (1.0 - 1.0 / mu_r[t]) * (np.eye(3) * vol + 0.5 * curl_int)

    M_raw = -C + N
    M = ComplexTensor2(M_raw)
    return MptRecord(
        frequency_hz=(omega / (2 * np.pi) if frequency_hz is None else frequency_hz),
        omega=omega,
        alpha=alpha,
        M=M,
        C=ComplexTensor2(C),
        N=ComplexTensor2(N),
        nu=tuple(nu[t] for t in tags),
        asymmetry_norm=M.asymmetry_norm,
    )


def compute_n0(mesh, materials, alpha, method="direct") -> ComplexTensor2:
    """Magnetostatic limit tensor: N evaluated on the nu = 0 solve.

    Identical integration path as compute_mpt at omega = 0; the result is
    real symmetric (the tiny imaginary gauge residual is dropped).
    """
    problem = transmission_problem(mesh, materials, alpha, omega=0.0)
    sols = solve_theta_zero(problem, method=method)
    rec = compute_mpt(sols, mesh, materials, alpha, omega=0.0)
    return ComplexTensor2(rec.N.entries.real)


# ---------------------------------------------------------------------------
# analytic sphere oracle
# ---------------------------------------------------------------------------

def sphere_eigenvalue(alpha, sigma, mu_r, omega):
    """Eigenvalue m(omega) of the conducting permeable sphere MPT, m(omega) I.

    From the radial eddy-current solution: interior field proportional to
    j1(k r) with k^2 = i omega mu0 mu_r sigma, matched to an exterior dipole.
    For ka beyond the overflow range of the spherical Bessel functions the
    tangent form is used (tan saturates to i for large imaginary argument).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if mu_r <= 0:
        raise ValueError("mu_r must be > 0")
    static = 4.0 * np.pi * alpha**3 * (mu_r - 1.0) / (mu_r + 2.0)
    if sigma == 0.0 or omega == 0.0:
        return complex(static)
    z = np.sqrt(1j * omega * mu_r * MU0 * sigma) * alpha
    if abs(z) <= 30.0:
        j0 = spherical_jn(0, z)
        j2 = spherical_jn(2, z)
        num = 2.0 * (mu_r - 1.0) * j0 + (2.0 * mu_r + 1.0) * j2
        den = (mu_r + 2.0) * j0 + (mu_r - 1.0) * j2
    else:
        t = np.tan(z)
        a0 = z * z * t
        a2 = (3.0 - z * z) * t - 3.0 * z
        num = 2.0 * (mu_r - 1.0) * a0 + (2.0 * mu_r + 1.0) * a2
        den = (mu_r + 2.0) * a0 + (mu_r - 1.0) * a2
    return complex(2.0 * np.pi * alpha**3 * num / den)


def mpt_sphere_analytic(alpha, sigma, mu_r, omega) -> ComplexTensor2:
    """Full isotropic MPT of the sphere: m(omega) times the identity."""
    return ComplexTensor2(sphere_eigenvalue(alpha, sigma, mu_r, omega) * np.eye(3))


# ---------------------------------------------------------------------------
# frequency sweeps and spectral feature counting
# ---------------------------------------------------------------------------

def sweep_spectra(mesh, materials, alpha, frequencies, method="direct",
                  threads=1, n0=None) -> SpectralSignature:
    """Eigenvalue spectra of R = Re(M - N0) and I = Im(M) over a sweep.

    One N0 solve is shared across all frequencies.  Frequencies solve
    independently (optionally in parallel); a failure is re-raised with the
    offending frequency named.
    """
    freqs = np.asarray(frequencies, dtype=float)
    if len(freqs) < 2:
        raise ValueError("need at least 2 frequencies")
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be strictly ascending")

    if n0 is None:
        n0 = compute_n0(mesh, materials, alpha, method=method)

    def one(f):
        try:
            omega = 2.0 * np.pi * f
            problem = transmission_problem(mesh, materials, alpha, omega)
            sols = solve(assemble(problem), method=method)
            rec = compute_mpt(sols, mesh, materials, alpha, omega, frequency_hz=f)
            return dataclasses.replace(rec, N0=n0)
        except Exception as exc:
            raise RuntimeError(f"FEM solve failed at f = {f} Hz: {exc}") from exc

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, freqs))
    else:
        records = [one(f) for f in freqs]

    lam_R = np.empty((len(freqs), 3))
    lam_I = np.empty((len(freqs), 3))
    for i, rec in enumerate(records):
        lam_R[i] = np.linalg.eigvalsh(rec.M.entries.real - n0.entries.real)
        lam_I[i] = np.linalg.eigvalsh(rec.M.entries.imag)
    norm = float(max(np.abs(lam_R).max(), np.abs(lam_I).max()))
    return SpectralSignature(
        frequencies=freqs, lambda_R=lam_R, lambda_I=lam_I,
        normalization=norm, records=tuple(records),
    )


@dataclass(frozen=True)
class FeatureCounts:
    inflections_R: tuple       # per eigenvalue branch of lambda_R
    maxima_I: tuple            # per eigenvalue branch of lambda_I
    material_count_estimate: int


def count_spectral_features(signature: SpectralSignature,
                            noise_floor=None) -> FeatureCounts:
    """Count non-stationary inflections of lambda_R and local maxima of lambda_I.

    Works on values normalised by the sweep-wide max |lambda| against log f.
    An inflection is a sign change of the discrete second difference at a
    point whose slope is above the noise floor; a maximum must be a strict
    interior local maximum above the floor.  The material-count estimate is
    the max count over the three eigenvalue branches.
    """
    f = signature.frequencies
    if len(f) < 5:
        raise ValueError("need at least 5 frequencies to count features")
    scale = signature.normalization or 1.0
    eta = 1.0e-3 if noise_floor is None else noise_floor / scale
    x = np.log10(f)

    inflections = []
    maxima = []
    for i in range(3):
        yR = signature.lambda_R[:, i] / scale
        d1 = np.diff(yR) / np.diff(x)
        d2 = np.diff(d1)
        count = 0
        last_sign = 0
        for j, v in enumerate(d2):
            if abs(v) <= eta:
                continue
            s = 1 if v > 0 else -1
            slope = max(abs(d1[j]), abs(d1[j + 1]))
            if last_sign != 0 and s != last_sign and slope > eta:
                count += 1
            last_sign = s
        inflections.append(count)

        yI = signature.lambda_I[:, i] / scale
        m = 0
        for j in range(1, len(yI) - 1):
            if yI[j] > yI[j - 1] and yI[j] > yI[j + 1] and yI[j] > eta:
                m += 1
        maxima.append(m)

    return FeatureCounts(
        inflections_R=tuple(inflections),
        maxima_I=tuple(maxima),
        material_count_estimate=max(max(inflections), max(maxima)),
    )


# ---------------------------------------------------------------------------
# transformation and canonical form
# ---------------------------------------------------------------------------

def transform_mpt(tensor, R) -> ComplexTensor2:
    """Push a rank-2 tensor through an orthogonal change of frame: R T R^T."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or np.linalg.norm(R.T @ R - np.eye(3)) > 1e-10:
        raise ValueError("R must be a 3x3 orthogonal matrix")
    T = tensor.entries if isinstance(tensor, ComplexTensor2) else np.asarray(tensor)
    return ComplexTensor2(R @ T @ R.T)


@dataclass(frozen=True)
class CanonicalObject:
    instance: ObjectInstance
    scaling: float                  # alpha_canonical / alpha_in
    used_high_conductivity: bool
    n0_unit: ComplexTensor2         # magnetostatic tensor of the unit shape


def canonicalize(mesh: TetMesh, materials, shape_id="shape", alpha=1.0,
                 method="direct") -> CanonicalObject:
    """Centre the shape at its centre of mass and scale to unit |det N0|.

    When the object has no permeability contrast (all mu_r = 1), or N0 is
    rank deficient, the size is fixed by the high-conductivity limit instead
    (largest region driven to nu = NU_HIGH_CONDUCTIVITY), matching the
    convention used when building dictionaries.
    """
    mats = materials_dict(materials)
    geom = element_geometry(mesh)
    obj = mesh.tags > 0
    w = geom.volumes[obj]
    centroids = geom.points[obj].mean(axis=1)
    com = (w[:, None] * centroids).sum(axis=0) / w.sum()
    centered = mesh.translated(-com)

    n0_unit = compute_n0(centered, mats, alpha=1.0, method=method)
    det = abs(np.linalg.det(n0_unit.entries.real))
    all_mu_one = all(m.mu_r == 1.0 for m in mats.values())
    used_high = False

    if all_mu_one or det < 1e-30:
        sigma_max = max(m.sigma for m in mats.values())
        if sigma_max == 0:
            raise ValueError("object with sigma = 0 and mu_r = 1 cannot be normalised")
        omega_inf = NU_HIGH_CONDUCTIVITY / (MU0 * sigma_max)
        problem = transmission_problem(centered, mats, 1.0, omega_inf)
        sols = solve(assemble(problem), method=method)
        rec = compute_mpt(sols, centered, mats, 1.0, omega_inf)
        det = abs(np.linalg.det(rec.M.entries.real))
        used_high = True

    alpha_c = det ** (-1.0 / 9.0)
    inst = ObjectInstance(
        shape_id=shape_id,
        alpha=alpha_c,
        z=np.zeros(3),
        materials=tuple(mats[t] for t in sorted(mats)),
        boundary_points=centered.nodes[centered.object_surface_nodes()],
        shape_mesh=centered,
    )
    return CanonicalObject(
        instance=inst,
        scaling=alpha_c / alpha,
        used_high_conductivity=used_high,
        n0_unit=n0_unit,
    )


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def mpt_record_dict(rec: MptRecord) -> dict:
    d = {
        "f_hz": rec.frequency_hz,
        "alpha": rec.alpha,
        "M_re": rec.M.entries.real.tolist(),
        "M_im": rec.M.entries.imag.tolist(),
        "N0": (rec.N0.entries.real.tolist() if rec.N0 is not None else None),
        "nu": list(rec.nu),
        "asymmetry_norm": rec.asymmetry_norm,
    }
    return d


def write_spectra_csv(signature: SpectralSignature, fh, header_lines=()):
    """CSV with columns f_hz,lamR1..3,lamI1..3; shortest round-trip floats."""
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write("f_hz,lamR1,lamR2,lamR3,lamI1,lamI2,lamI3\n")
    for i, f in enumerate(signature.frequencies):
        vals = [f, *signature.lambda_R[i], *signature.lambda_I[i]]
        fh.write(",".join(repr(float(v)) for v in vals) + "\n")
