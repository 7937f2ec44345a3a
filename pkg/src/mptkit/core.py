"""Shared domain types, physical constants and the induction number nu.

Everything here is a plain immutable value type; instances can be shared
freely between threads.  SI units throughout: conductivities in S/m,
lengths in m, angular frequencies in rad/s.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Permeability of free space (exact pre-2019 SI value).
MU0 = 4.0e-7 * np.pi

# Above this value of nu the asymptotic characterisation is strained and
# compute_nu raises a NuRegimeWarning.
NU_WARN_THRESHOLD = 1.0e4

# Relative tolerance used when symmetrising analytically symmetric tensors.
DEFAULT_SYM_TOL = 1.0e-8


class NuRegimeWarning(UserWarning):
    """Induction number is far outside the O(1) regime the expansion assumes."""


@dataclass(frozen=True)
class Material:
    """Conductivity and relative permeability of one object region."""

    sigma: float        # S/m
    mu_r: float = 1.0   # dimensionless, mu*/mu0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"conductivity must be >= 0, got {self.sigma}")
        if self.mu_r <= 0:
            raise ValueError(f"relative permeability must be > 0, got {self.mu_r}")


def compute_nu(material: Material, alpha: float, omega: float) -> float:
    """Induction number omega * mu0 * sigma * alpha**2 for one region.

    Bilinear in sigma and omega, quadratic in alpha.  Warns (NuRegimeWarning)
    when the result exceeds NU_WARN_THRESHOLD.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if omega < 0:
        raise ValueError(f"omega must be >= 0, got {omega}")
    nu = omega * MU0 * material.sigma * alpha**2
    if nu > NU_WARN_THRESHOLD:
        warnings.warn(
            f"nu = {nu:.3g} exceeds {NU_WARN_THRESHOLD:g}; asymptotic regime strained",
            NuRegimeWarning,
            stacklevel=2,
        )
    return nu


@dataclass(frozen=True)
class DimensionlessParams:
    """Per-region induction numbers together with the drive frequency."""

    nu: tuple          # one value per object region, dimensionless
    omega: float       # rad/s
    frequency_hz: float

    @classmethod
    def from_materials(cls, materials, alpha, frequency_hz):
        omega = 2.0 * np.pi * frequency_hz
        nu = tuple(compute_nu(m, alpha, omega) for m in materials)
        return cls(nu=nu, omega=omega, frequency_hz=frequency_hz)


class ComplexTensor2:
    """3x3 complex symmetric rank-2 tensor (m^3 when housing an MPT).

    Construction symmetrises the input and records the Frobenius norm of the
    skew part, so downstream code can check how symmetric the raw data was.
    """

    __slots__ = ("entries", "asymmetry_norm")

    def __init__(self, entries, sym_tol=None):
        a = np.asarray(entries, dtype=complex)
        if a.shape != (3, 3):
            raise ValueError(f"expected 3x3 entries, got shape {a.shape}")
        if not np.all(np.isfinite(a.view(float))):
            raise ValueError("tensor entries must be finite")
        skew = 0.5 * (a - a.T)
        sym = 0.5 * (a + a.T)
        asym = float(np.linalg.norm(skew))
        if sym_tol is not None:
            scale = max(float(np.linalg.norm(sym)), np.finfo(float).tiny)
            if asym > sym_tol * scale:
                raise ValueError(
                    f"asymmetry {asym:.3e} exceeds tolerance {sym_tol:g} * {scale:.3e}"
                )
        sym.flags.writeable = False
        self.entries = sym
        self.asymmetry_norm = asym

    @property
    def real(self):
        return self.entries.real

    @property
    def imag(self):
        return self.entries.imag

    def eigenvalues_real(self):
        """Ascending eigenvalues of the real part (real symmetric)."""
        return np.linalg.eigvalsh(self.entries.real)

    def eigenvalues_imag(self):
        """Ascending eigenvalues of the imaginary part (real symmetric)."""
        return np.linalg.eigvalsh(self.entries.imag)

    def norm(self):
        return float(np.linalg.norm(self.entries))

    def __add__(self, other):
        return ComplexTensor2(self.entries + _entries_of(other))

    def __sub__(self, other):
        return ComplexTensor2(self.entries - _entries_of(other))

    def __neg__(self):
        return ComplexTensor2(-self.entries)

    def __mul__(self, scalar):
        return ComplexTensor2(self.entries * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"ComplexTensor2({self.entries!r})"


def _entries_of(t):
    return t.entries if isinstance(t, ComplexTensor2) else np.asarray(t, dtype=complex)


@dataclass(frozen=True)
class ObjectInstance:
    """A unit-scale shape placed in the world: x = alpha * R @ xi + z.

    ``shape_id`` names the unit shape; ``boundary_points`` are vertices of the
    triangulated object boundary in unit-scale coordinates (used for scene
    separation checks).  ``materials`` has one entry per object region; more
    than one entry means the object is inhomogeneous.
    """

    shape_id: str
    alpha: float
    z: np.ndarray
    materials: tuple
    rotation: np.ndarray = None
    boundary_points: np.ndarray = None
    shape_mesh: object = None
    mpt_by_frequency: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if len(self.materials) < 1:
            raise ValueError("object needs at least one material region")
        z = np.asarray(self.z, dtype=float).reshape(3)
        z.flags.writeable = False
        object.__setattr__(self, "z", z)
        R = self.rotation
        if R is None:
            R = np.eye(3)
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3) or np.linalg.norm(R.T @ R - np.eye(3)) > 1e-12:
            raise ValueError("rotation must be a 3x3 orthogonal matrix")
        R = R.copy()
        R.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        if self.boundary_points is not None:
            bp = np.asarray(self.boundary_points, dtype=float).reshape(-1, 3)
            bp.flags.writeable = False
            object.__setattr__(self, "boundary_points", bp)

    def world_boundary_points(self):
        if self.boundary_points is None:
            raise ValueError(f"object {self.shape_id!r} carries no boundary points")
        return self.alpha * self.boundary_points @ self.rotation.T + self.z

    def mpt(self, frequency_hz):
        """3x3 MPT matrix attached for the given frequency."""
        try:
            return self.mpt_by_frequency[frequency_hz]
        except KeyError:
            raise KeyError(
                f"object {self.shape_id!r} has no MPT at f = {frequency_hz} Hz"
            ) from None


@dataclass(frozen=True)
class Scene:
    """A collection of placed objects in a free-space background."""

    objects: tuple

    def __post_init__(self):
        if len(self.objects) == 0:
            raise ValueError("scene must contain at least one object")
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def alpha_max(self):
        return max(o.alpha for o in self.objects)

    @property
    def alpha_min(self):
        return min(o.alpha for o in self.objects)


@dataclass(frozen=True)
class SceneReport:
    """Result of validate_scene; the scene itself is never mutated."""

    n_objects: int
    alpha_max: float
    min_separation: float   # inf for a single object
    well_spaced: bool
    pairwise_separation: tuple


def validate_scene(scene: Scene) -> SceneReport:
    """Check spacing hypotheses for the multi-object field expansion.

    Separation between two objects is the minimum distance between the
    triangulated boundary vertices of their scaled, placed meshes.  The scene
    is well spaced when the smallest separation is at least alpha_max.
    Overlapping objects (centroid distance smaller than the sum of inscribed
    radii, or zero vertex separation) raise ValueError.
    """
    objs = scene.objects
    if len(objs) == 1:
        return SceneReport(1, objs[0].alpha, np.inf, True, ())

    pts = [o.world_boundary_points() for o in objs]
    centroids = [p.mean(axis=0) for p in pts]
    r_inscribed = [np.min(np.linalg.norm(p - c, axis=1)) for p, c in zip(pts, centroids)]

    pair_sep = []
    min_sep = np.inf
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            d = _min_pointset_distance(pts[i], pts[j])
            c_dist = np.linalg.norm(centroids[i] - centroids[j])
            if d <= 0 or c_dist < r_inscribed[i] + r_inscribed[j]:
                raise ValueError(
                    f"objects {i} and {j} overlap (boundary separation {d:.3e})"
                )
            pair_sep.append((i, j, d))
            min_sep = min(min_sep, d)

    return SceneReport(
        n_objects=len(objs),
        alpha_max=scene.alpha_max,
        min_separation=float(min_sep),
        well_spaced=bool(min_sep >= scene.alpha_max),
        pairwise_separation=tuple(pair_sep),
    )


def _min_pointset_distance(a, b):
    # chunked to keep the pairwise distance matrix small
    best = np.inf
    for start in range(0, len(a), 1024):
        block = a[start:start + 1024]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        best = min(best, float(np.sqrt(d2.min())))
    return best
