"""Strain image quality metrics: CNR and SR over patch ensembles, RMSE, EPR histograms.

CNR and SR are evaluated on many small overlapping patches inside a target
window and a background window rather than once on the whole windows; the
reported value is the mean and standard deviation over patch pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elasticity import EprField

#: Minimum distance of a window from the raster edge (one-sided strain stencil).
BORDER = 2


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    target: tuple[int, int, int, int]  # row, col, height, width
    background: tuple[int, int, int, int]
    patch_size: int = 8
    patch_stride: int = 4
    pairing_seed: int | None = None

    def validate(self, shape) -> "WindowSpec":
        rows, cols = shape
        for name in ("target", "background"):
            r, c, h, w = getattr(self, name)
            if h <= 0 or w <= 0:
                raise MetricError(f"{name} window has empty extent")
            if r < BORDER or c < BORDER or r + h > rows - BORDER or c + w > cols - BORDER:
                raise MetricError(
                    f"{name} window {getattr(self, name)} must lie inside the {rows}x{cols} "
                    f"raster at least {BORDER} pixels from the border"
                )
            if len(patch_origins(getattr(self, name), self.patch_size, self.patch_stride)) < 4:
                raise MetricError(f"{name} window admits fewer than 4 patches")
        return self

    def to_dict(self) -> dict:
        return {
            "target": list(self.target),
            "background": list(self.background),
            "patch_size": self.patch_size,
            "patch_stride": self.patch_stride,
            "pairing_seed": self.pairing_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSpec":
        return cls(
            target=tuple(int(v) for v in d["target"]),
            background=tuple(int(v) for v in d["background"]),
            patch_size=int(d.get("patch_size", 8)),
            patch_stride=int(d.get("patch_stride", 4)),
            pairing_seed=d.get("pairing_seed"),
        )


@dataclass(frozen=True)
class MetricResult:
    mean: float
    std: float
    n_patches: int
    values: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class EprHistogram:
    counts: np.ndarray
    edges: np.ndarray
    below: int
    above: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.below + self.above


def patch_origins(rect, size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of the patches inside ``rect``, in raster order."""
    r, c, h, w = rect
    if size < 1 or stride < 1:
        raise MetricError("patch size and stride must be positive")
    return [
        (r + i, c + j)
        for i in range(0, h - size + 1, stride)
        for j in range(0, w - size + 1, stride)
    ]


def _patch_pairs(strain: np.ndarray, w: WindowSpec):
    strain = np.asarray(strain, dtype=np.float64)
    w.validate(strain.shape)
    k = w.patch_size
    tgt = [strain[r : r + k, c : c + k] for r, c in patch_origins(w.target, k, w.patch_stride)]
    bkg = [strain[r : r + k, c : c + k] for r, c in patch_origins(w.background, k, w.patch_stride)]
    if w.pairing_seed is not None:
        order = np.random.default_rng(w.pairing_seed).permutation(len(bkg))
        bkg = [bkg[i] for i in order]
    n = max(len(tgt), len(bkg))
    return [(tgt[i % len(tgt)], bkg[i % len(bkg)]) for i in range(n)]


def _summarize(values, what) -> MetricResult:
    if not values:
        raise MetricError(f"every patch pair was degenerate for {what}")
    arr = np.asarray(values)
    return MetricResult(float(arr.mean()), float(arr.std()), len(values), tuple(values))


def cnr_pair(target: np.ndarray, background: np.ndarray) -> float | None:
    """Contrast-to-noise ratio of one patch pair, ``None`` if both are flat."""
    mt, mb = target.mean(), background.mean()
    vt, vb = target.var(), background.var()
    # flat patches: treat roundoff-level variance as zero
    if vt + vb <= 1e-24 * (mt * mt + mb * mb):
        return None
    return float(np.sqrt(2.0 * (mb - mt) ** 2 / (vb + vt)))


def sr_pair(target: np.ndarray, background: np.ndarray) -> float | None:
    mb = background.mean()
    if abs(mb) <= 1e-9:
        return None
    return float(target.mean() / mb)


def cnr(strain, w: WindowSpec) -> MetricResult:
    vals = [v for t, b in _patch_pairs(strain, w) if (v := cnr_pair(t, b)) is not None]
    return _summarize(vals, "CNR")


def sr(strain, w: WindowSpec) -> MetricResult:
    """Strain ratio target/background; below 1 means a stiffer target."""
    vals = [v for t, b in _patch_pairs(strain, w) if (v := sr_pair(t, b)) is not None]
    return _summarize(vals, "SR")


def rmse_field(estimate, truth, margin: int = 2) -> float:
    est = np.asarray(estimate, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise MetricError(f"shape mismatch: {est.shape} vs {tru.shape}")
    if margin < 2:
        raise MetricError("margin must be at least 2 pixels")
    inner = (slice(margin, est.shape[0] - margin), slice(margin, est.shape[1] - margin))
    diff = est[inner] - tru[inner]
    if diff.size == 0:
        raise MetricError("margin leaves no pixels")
    return float(np.sqrt(np.mean(diff * diff)))


def epr_histogram(v: EprField, bins: int = 10, range=(0.1, 0.6)) -> EprHistogram:
    """Histogram of valid EPR values; values outside ``range`` go to ``below``/``above``."""
    if bins < 2:
        raise MetricError("need at least 2 bins")
    lo, hi = range
    vals = np.asarray(v.ve)[np.asarray(v.valid, dtype=bool)]
    inside = (vals >= lo) & (vals <= hi)
    counts, edges = np.histogram(vals[inside], bins=bins, range=(lo, hi))
    return EprHistogram(counts, edges, int(np.sum(vals < lo)), int(np.sum(vals > hi)))


def in_range_fraction(v: EprField, range=(0.1, 0.6)) -> float:
    """Fraction of valid EPR pixels strictly inside ``range``."""
    valid = np.asarray(v.valid, dtype=bool)
    n = np.count_nonzero(valid)
    if n == 0:
        return 0.0
    ve = np.asarray(v.ve)[valid]
    return float(np.count_nonzero((ve > range[0]) & (ve < range[1])) / n)
