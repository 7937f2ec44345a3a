"""Leading-order perturbed magnetic field of characterised objects.

The perturbation at x is a sum over objects of D2G(x, z) M H0(z), where D2G
is the Hessian of the free-space Laplace Green's function.  Background field
providers cover the two cases used throughout: uniform fields and point
magnetic dipoles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Scene


@dataclass(frozen=True)
class FieldProbe:
    """Field evaluation point; must lie outside every scaled object."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(3)
        x.flags.writeable = False
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class DipoleSource:
    """Small exciting coil: position s and dipole moment p."""

    s: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(3)
        p = np.asarray(self.p, dtype=float).reshape(3)
        if np.linalg.norm(p) == 0:
            raise ValueError("dipole moment must be non-zero")
        s.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "p", p)


def d2g(x, z):
    """Hessian of the Laplace Green's function: (3 r_hat r_hat - I) / (4 pi r^3).

    Symmetric, trace free, homogeneous of degree -3.  Raises for x == z.
    """
    r = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
    dist = np.linalg.norm(r)
    if dist == 0:
        raise ValueError("d2g is singular at x == z")
    rh = r / dist
    return (3.0 * np.outer(rh, rh) - np.eye(3)) / (4.0 * np.pi * dist**3)


def uniform_h0(h):
    """Background provider for a uniform field."""
    h = np.asarray(h, dtype=float).reshape(3)

    def provider(z):
        return h

    provider.description = f"uniform H0 = {h.tolist()}"
    return provider


def dipole_h0(source: DipoleSource):
    """Background provider of a point dipole: H0(z) = D2G(z, s) p."""

    def provider(z):
        return d2g(z, source.s) @ source.p

    provider.description = f"dipole at {source.s.tolist()}, p = {source.p.tolist()}"
    provider.source = source
    return provider


def _probe_clearance(scene: Scene, x):
    for i, obj in enumerate(scene.objects):
        if np.linalg.norm(x - obj.z) <= obj.alpha:
            raise ValueError(
                f"probe at {np.asarray(x).tolist()} is inside/too close to object {i} "
                f"(within alpha = {obj.alpha} of its centre)"
            )


def perturbed_field(scene: Scene, h0_provider, probe, frequency_hz=None):
    """Evaluate sum_n D2G(x, z_n) M_n H0(z_n) at one probe.

    Each object must carry its MPT: either attached per frequency (then
    frequency_hz selects it) or as a single 3x3 matrix under the key None.
    The remainder term of the expansion, O(alpha_max^4), is dropped.
    """
    x = probe.x if isinstance(probe, FieldProbe) else np.asarray(probe, float)
    _probe_clearance(scene, x)
    out = np.zeros(3, dtype=complex)
    for obj in scene.objects:
        M = np.asarray(_object_mpt(obj, frequency_hz))
        out += d2g(x, obj.z) @ M @ h0_provider(obj.z)
    return out


def _object_mpt(obj, frequency_hz):
    table = obj.mpt_by_frequency
    if not table:
        raise KeyError(f"object {obj.shape_id!r} carries no MPT")
    if frequency_hz is None:
        if len(table) == 1:
            return next(iter(table.values()))
        raise KeyError(
            f"object {obj.shape_id!r} has MPTs at several frequencies; pass frequency_hz"
        )
    return obj.mpt(frequency_hz)


def field_sweep_rows(scene: Scene, h0_provider, probes, frequency_hz=None):
    """Rows x1,x2,x3,Hre1,Him1,Hre2,Him2,Hre3,Him3 for the field-sweep CSV."""
    rows = []
    for p in probes:
        h = perturbed_field(scene, h0_provider, p, frequency_hz)
        x = p.x if isinstance(p, FieldProbe) else np.asarray(p, float)
        rows.append([x[0], x[1], x[2],
                     h[0].real, h[0].imag, h[1].real, h[1].imag,
                     h[2].real, h[2].imag])
    return rows
