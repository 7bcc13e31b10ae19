"""Synthetic pre/post-compression RF pairs with known displacement.

Strain is built directly from the material map: under uniaxial loading the
axial stress is the same in every layer, so ``e11 = e_app * E_bg / E_local``.
Around each inclusion the strain relaxes from the inclusion value back to
the background value as ``exp(-d / decay_length)`` with ``d`` the distance
outside the boundary, standing in for the eigenstrain. Lateral strain then
follows the uniaxial relation with the local Poisson's ratio, and the
displacement is the running integral of the strain.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.integrate import cumulative_trapezoid

from .elasticity import (
    EPR_FLOOR,
    DisplacementField,
    EprField,
    MaterialParams,
    StrainField,
    diff,
)
from .signal_proc import RfFrame


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float]  # (axial, lateral) pixels
    radius: float
    material: MaterialParams = MaterialParams(youngs_modulus=40.0)
    decay_length: float = 3.0  # pixels


@dataclass(frozen=True)
class PsfSpec:
    sampling_freq: float = 40.0  # MHz
    center_freq: float = 8.0  # MHz
    axial_sigma_wavelengths: float = 1.5
    lateral_sigma: float = 2.0  # pixels

    @property
    def samples_per_wavelength(self) -> float:
        return self.sampling_freq / self.center_freq


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int] = (128, 128)
    background: MaterialParams = MaterialParams()
    inclusions: tuple[Inclusion, ...] = ()
    applied_strain: float = -0.01
    scatterer_density: float = 2.0
    seed: int = 0
    psf: PsfSpec = PsfSpec()

    def validate(self) -> "PhantomSpec":
        rows, cols = self.shape
        if rows < 3 or cols < 3:
            raise PhantomSpecError(f"grid {self.shape} is too small")
        if abs(self.applied_strain) > 0.05:
            raise PhantomSpecError(f"|applied_strain| = {abs(self.applied_strain)} exceeds 0.05")
        if not self.scatterer_density > 0:
            raise PhantomSpecError("scatterer density must be positive")
        if not self.psf.sampling_freq > 2 * self.psf.center_freq:
            raise PhantomSpecError("PSF carrier is not resolvable at the sampling frequency")
        for k, inc in enumerate(self.inclusions):
            ca, cl = inc.center
            r = inc.radius
            if r <= 0 or ca - r < 0 or cl - r < 0 or ca + r > rows - 1 or cl + r > cols - 1:
                raise PhantomSpecError(f"inclusion {k} is not fully inside the {rows}x{cols} grid")
            if inc.material.youngs_modulus < 2 * self.background.youngs_modulus:
                raise PhantomSpecError(
                    f"inclusion {k} must be at least twice as stiff as the background"
                )
            if inc.decay_length < 0:
                raise PhantomSpecError("decay length must be nonnegative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        for inc in d["inclusions"]:
            inc["center"] = list(inc["center"])
        d["inclusions"] = list(d["inclusions"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            d = dict(d)
            if "background" in d:
                d["background"] = MaterialParams(**d["background"])
            incs = []
            for inc in d.get("inclusions", ()):
                inc = dict(inc)
                inc["center"] = tuple(float(c) for c in inc["center"])
                if "material" in inc:
                    inc["material"] = MaterialParams(**inc["material"])
                incs.append(Inclusion(**inc))
            d["inclusions"] = tuple(incs)
            if "shape" in d:
                d["shape"] = tuple(int(s) for s in d["shape"])
            if "psf" in d:
                d["psf"] = PsfSpec(**d["psf"])
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, PhantomSpecError):
                raise
            raise PhantomSpecError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise PhantomSpecError(f"invalid JSON: {exc}") from exc


@dataclass(frozen=True)
class GroundTruth:
    displacement: DisplacementField
    strain: StrainField
    epr_true: EprField
    poisson: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class ScattererField:
    axial: np.ndarray
    lateral: np.ndarray
    amplitude: np.ndarray

    def __len__(self):
        return len(self.amplitude)

    def moved(self, d_axial, d_lateral) -> "ScattererField":
        return ScattererField(self.axial + d_axial, self.lateral + d_lateral, self.amplitude)


def _inclusion_kernels(spec: PhantomSpec):
    rows, cols = spec.shape
    a, l = np.meshgrid(np.arange(rows, dtype=float), np.arange(cols, dtype=float), indexing="ij")
    for inc in spec.inclusions:
        dist = np.hypot(a - inc.center[0], l - inc.center[1]) - inc.radius
        inside = dist <= 0
        if inc.decay_length > 0:
            k = np.exp(-np.maximum(dist, 0.0) / inc.decay_length)
        else:
            k = np.zeros_like(dist)
        k[inside] = 1.0
        yield inc, inside, k


def ground_truth_displacement(spec: PhantomSpec) -> GroundTruth:
    spec.validate()
    rows, cols = spec.shape
    ratio = np.ones(spec.shape)
    poisson = np.full(spec.shape, spec.background.poisson_ratio)
    for inc, inside, k in _inclusion_kernels(spec):
        ratio += (spec.background.youngs_modulus / inc.material.youngs_modulus - 1.0) * k
        poisson[inside] = inc.material.poisson_ratio
    e11 = spec.applied_strain * ratio
    e22 = -poisson * e11

    # w1 = 0 at the transducer face, w2 = 0 on the centre A-line
    w1 = cumulative_trapezoid(e11, axis=0, initial=0)
    c0 = cols // 2
    w2 = np.zeros(spec.shape)
    w2[:, c0:] = cumulative_trapezoid(e22[:, c0:], axis=1, initial=0)
    w2[:, : c0 + 1] = -cumulative_trapezoid(e22[:, c0::-1], axis=1, initial=0)[:, ::-1]

    disp = DisplacementField(w1, w2)
    strain = StrainField(e11=e11, e12=diff(w1, 1), e21=diff(w2, 0), e22=e22)
    valid = np.abs(e11) >= EPR_FLOOR
    ve = np.zeros(spec.shape)
    np.divide(-e22, e11, out=ve, where=valid)
    return GroundTruth(disp, strain, EprField(ve, valid), poisson)


def make_scatterers(spec: PhantomSpec) -> ScattererField:
    """Uniform random sub-pixel scatterers with standard-normal amplitudes."""
    if not spec.scatterer_density > 0:
        raise PhantomSpecError("scatterer density must be positive")
    rows, cols = spec.shape
    n = int(round(spec.scatterer_density * rows * cols))
    rng = np.random.default_rng(spec.seed)
    axial = rng.uniform(-0.5, rows - 0.5, n)
    lateral = rng.uniform(-0.5, cols - 0.5, n)
    amplitude = rng.standard_normal(n)
    return ScattererField(axial, lateral, amplitude)


def psf_axial(offset, psf: PsfSpec) -> np.ndarray:
    lam = psf.samples_per_wavelength
    sigma = psf.axial_sigma_wavelengths * lam
    offset = np.asarray(offset, dtype=np.float64)
    return np.exp(-0.5 * (offset / sigma) ** 2) * np.cos(2 * np.pi * offset / lam)


def psf_lateral(offset, psf: PsfSpec) -> np.ndarray:
    offset = np.asarray(offset, dtype=np.float64)
    return np.exp(-0.5 * (offset / psf.lateral_sigma) ** 2)


def render_rf(scatterers: ScattererField, psf: PsfSpec, shape, chunk: int = 4096) -> RfFrame:
    """Sum of separable PSF stamps, one per scatterer.

    Chunks are accumulated in scatterer order so the result does not depend
    on how the work is split.
    """
    if not psf.sampling_freq > 2 * psf.center_freq:
        raise ValueError("PSF carrier is not resolvable at the sampling frequency")
    rows, cols = shape
    r = np.arange(rows, dtype=np.float64)[:, None]
    c = np.arange(cols, dtype=np.float64)[:, None]
    frame = np.zeros((rows, cols))
    for start in range(0, len(scatterers), chunk):
        sl = slice(start, start + chunk)
        ax = psf_axial(r - scatterers.axial[sl], psf) * scatterers.amplitude[sl]
        lat = psf_lateral(c - scatterers.lateral[sl], psf)
        frame += ax @ lat.T
    return RfFrame(frame, psf.sampling_freq, psf.center_freq, 1.0)


def displacement_at(d: DisplacementField, axial, lateral) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation of ``d`` (in pixels) at arbitrary positions."""
    coords = np.vstack([axial, lateral])
    u1 = ndimage.map_coordinates(d.w1 / d.spacing[0], coords, order=1, mode="nearest")
    u2 = ndimage.map_coordinates(d.w2 / d.spacing[1], coords, order=1, mode="nearest")
    return u1, u2


def make_pair(spec: PhantomSpec) -> tuple[RfFrame, RfFrame, GroundTruth]:
    gt = ground_truth_displacement(spec)
    sc = make_scatterers(spec)
    i1 = render_rf(sc, spec.psf, spec.shape)
    u1, u2 = displacement_at(gt.displacement, sc.axial, sc.lateral)
    i2 = render_rf(sc.moved(u1, u2), spec.psf, spec.shape)
    return i1, i2, gt


def inclusion_phantom(seed: int = 0, size: int = 128, applied_strain: float = -0.01,
                      contrast: float = 2.0, radius: float | None = None,
                      decay_length: float = 3.0, poisson: float = 0.45) -> PhantomSpec:
    """Square phantom with one centred inclusion ``contrast`` times stiffer."""
    radius = size * 0.16 if radius is None else radius
    bg = MaterialParams(20.0, poisson)
    inc = Inclusion(
        center=((size - 1) / 2, (size - 1) / 2),
        radius=radius,
        material=MaterialParams(20.0 * contrast, poisson),
        decay_length=decay_length,
    )
    return PhantomSpec((size, size), bg, (inc,), applied_strain, 2.0, seed).validate()
