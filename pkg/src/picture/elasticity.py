"""Strain, Hooke's-law and effective Poisson's ratio (EPR) primitives.

Axis convention: rasters are indexed ``[axial, lateral]``. Component 1 is
axial (depth, along the beam) and component 2 is lateral. Compression along
the beam gives ``e11 < 0`` and the accompanying lateral expansion ``e22 > 0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

#: Strains with ``|e11|`` below this are too close to zero to divide by.
EPR_FLOOR = 1e-6
#: Used for the in-range mean EPR when no pixel is inside the accepted range.
EPR_FALLBACK = 0.35


class ShapeError(ValueError):
    """Raised when a raster is too small or shapes do not line up."""


class DerivativeStencil(str, enum.Enum):
    CENTRAL = "central"
    FORWARD = "forward"


@dataclass(frozen=True)
class DisplacementField:
    """Axial (``w1``) and lateral (``w2``) displacement.

    Values are in the same physical unit as ``spacing`` (the size of one
    pixel along each axis). With the default unit spacing, displacements are
    in samples.
    """

    w1: np.ndarray
    w2: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        if w1.ndim != 2 or w1.shape != w2.shape:
            raise ShapeError(f"w1 {w1.shape} and w2 {w2.shape} must be equal 2D shapes")
        if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
            raise ValueError("displacement must be finite")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.w1.shape

    @classmethod
    def zeros(cls, shape, spacing=(1.0, 1.0)) -> "DisplacementField":
        return cls(np.zeros(shape), np.zeros(shape), spacing)


@dataclass(frozen=True)
class StrainField:
    """In-plane strain components; ``eij = dWi/dj``."""

    e11: np.ndarray
    e12: np.ndarray
    e21: np.ndarray
    e22: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.e11.shape


@dataclass(frozen=True)
class EprField:
    ve: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class EprRange:
    ve_min: float = 0.1
    ve_max: float = 0.6

    def __post_init__(self):
        if not (0.0 <= self.ve_min < self.ve_max <= 1.0):
            raise ValueError(f"need 0 <= ve_min < ve_max <= 1, got ({self.ve_min}, {self.ve_max})")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.ve_min + self.ve_max)


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float = 20.0  # kPa
    poisson_ratio: float = 0.45

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not (0.2 <= self.poisson_ratio <= 0.5):
            raise ValueError(f"Poisson's ratio {self.poisson_ratio} outside [0.2, 0.5]")

    def axial_stress(self, e11):
        """Uniaxial stress ``sigma11 = E * e11`` (kPa)."""
        return self.youngs_modulus * np.asarray(e11)


# -- finite differences ------------------------------------------------------
#
# Both stencils keep the raster shape: one-sided differences fill the border.
# ``diff_adjoint`` is the exact transpose, used by the loss gradient.


def diff(f: np.ndarray, axis: int, stencil=DerivativeStencil.CENTRAL) -> np.ndarray:
    """Unit-spacing derivative of ``f`` along ``axis``."""
    f = np.moveaxis(np.asarray(f, dtype=np.float64), axis, 0)
    if f.shape[0] < 2:
        raise ShapeError("need at least 2 samples to differentiate")
    out = np.empty_like(f)
    if DerivativeStencil(stencil) is DerivativeStencil.CENTRAL:
        out[1:-1] = 0.5 * (f[2:] - f[:-2])
        out[0] = f[1] - f[0]
    else:
        out[:-1] = f[1:] - f[:-1]
    out[-1] = f[-1] - f[-2]
    return np.moveaxis(out, 0, axis)


def diff_adjoint(g: np.ndarray, axis: int, stencil=DerivativeStencil.CENTRAL) -> np.ndarray:
    """Transpose of :func:`diff` applied to ``g``."""
    g = np.moveaxis(np.asarray(g, dtype=np.float64), axis, 0)
    out = np.zeros_like(g)
    if DerivativeStencil(stencil) is DerivativeStencil.CENTRAL:
        half = 0.5 * g[1:-1]
        out[2:] += half
        out[:-2] -= half
        out[1] += g[0]
        out[0] -= g[0]
    else:
        out[1:] += g[:-1]
        out[:-1] -= g[:-1]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def strain_from_displacement(d: DisplacementField, stencil=DerivativeStencil.CENTRAL) -> StrainField:
    if d.shape[0] < 3 or d.shape[1] < 3:
        raise ShapeError(f"displacement raster {d.shape} is smaller than 3x3")
    sa, sl = d.spacing
    return StrainField(
        e11=diff(d.w1, 0, stencil) / sa,
        e12=diff(d.w1, 1, stencil) / sl,
        e21=diff(d.w2, 0, stencil) / sa,
        e22=diff(d.w2, 1, stencil) / sl,
    )


def epr(s: StrainField, floor: float = EPR_FLOOR) -> EprField:
    """Pointwise effective Poisson's ratio ``-e22 / e11``.

    Pixels with ``|e11| < floor`` are marked invalid and get ``ve = 0``.
    """
    if not floor > 0:
        raise ValueError("floor must be positive")
    e11 = np.asarray(s.e11, dtype=np.float64)
    e22 = np.asarray(s.e22, dtype=np.float64)
    valid = np.abs(e11) >= floor
    ve = np.zeros_like(e11)
    np.divide(-e22, e11, out=ve, where=valid)
    return EprField(ve=ve, valid=valid)


def epr_mask(v: EprField, r: EprRange = EprRange()) -> np.ndarray:
    """1 where the EPR is outside ``(ve_min, ve_max)`` or invalid, else 0."""
    inside = v.valid & (v.ve > r.ve_min) & (v.ve < r.ve_max)
    return np.where(inside, 0.0, 1.0)


def mean_epr_in_range(v: EprField, m: np.ndarray, fallback: float = EPR_FALLBACK) -> float:
    keep = np.asarray(m) == 0
    n = np.count_nonzero(keep)
    if n == 0:
        return float(fallback)
    # np.sum over a 1D array uses fixed pairwise summation: reproducible.
    return float(np.sum(v.ve[keep]) / n)


def uniaxial_lateral_strain(e11, v: float) -> np.ndarray:
    """Lateral strain of a uniaxially loaded isotropic material."""
    if not (0.0 < v < 1.0):
        raise ValueError("Poisson's ratio must be in (0, 1)")
    return -v * np.asarray(e11, dtype=np.float64)
