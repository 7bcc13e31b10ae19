"""Coarse-to-fine minimization of the elastography objective.

The displacement field itself is the optimization variable. A fit stage
runs coarse to fine on the data and smoothness terms alone; a refine stage
then minimizes the full configured objective at the finest level. When the
EPR term is on, the refine stage starts from a lateral field integrated from
the fitted axial strain at a nominal EPR. Both stages run an Adam-style
update on :func:`picture.losses.loss_and_gradient`.

A trial step is accepted only if it lowers both the objective with the EPR
mask and in-range mean held at their current values (the function the
gradient belongs to) and the fully recomputed objective; otherwise the step
is halved. The accepted loss trace therefore never increases after the
warm-up iterations at the start of each fit level.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .elasticity import DerivativeStencil, DisplacementField, EprRange, strain_from_displacement
from .losses import LossBreakdown, LossWeights, freeze_state, loss_and_gradient, total_loss
from .signal_proc import RfFrame, build_channels

log = logging.getLogger(__name__)

# Steps are accepted unconditionally for this many iterations at the start of
# each fit level; at an exactly flat start (e.g. zero lateral field) every L1 term
# sits on its kink and no full Adam step is a descent step.
WARMUP_ITERATIONS = 10
MIN_STEP_FRACTION = 1e-4
# A step may raise the recomputed loss by this relative amount (roundoff).
ACCEPT_RTOL = 1e-6

TRACE_COLUMNS = ("iteration", "level", "data", "s1", "s2", "vd", "vs", "total", "stage")


class DivergenceError(RuntimeError):
    """The loss blew up; ``report`` holds the trace up to the failure."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    pyramid_levels: int = 3
    iterations_per_level: int = 600
    step_size: float = 0.02  # finest-level pixels per iteration
    adaptive_moments: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    convergence_tol: float = 1e-6
    init: str = "axial-seed"
    weights: LossWeights = LossWeights()
    seed: int = 0
    stencil: str = "central"
    # |e11| below this makes a pixel's EPR invalid during the solve; coarser
    # than the library default because early iterates have near-zero strain
    epr_floor: float = 1e-3
    # with the EPR term on, the refine stage starts from the lateral field
    # implied by this EPR; None keeps the fitted lateral field
    lateral_seed_epr: float | None = EprRange().midpoint

    def validate(self, shape=None) -> "SolverConfig":
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.init not in ("zero", "axial-seed"):
            raise ValueError(f"unknown init {self.init!r}")
        b1, b2, eps = self.adaptive_moments
        if not (0 <= b1 < 1 and 0 <= b2 < 1 and eps > 0):
            raise ValueError("adaptive_moments must be (beta1, beta2, eps) with betas in [0, 1)")
        DerivativeStencil(self.stencil)
        if not self.epr_floor > 0:
            raise ValueError("epr_floor must be positive")
        if self.lateral_seed_epr is not None and not 0 < self.lateral_seed_epr < 1:
            raise ValueError("lateral_seed_epr must lie in (0, 1)")
        if shape is not None:
            max_levels = max(1, int(math.floor(math.log2(min(shape)))) - 3)
            if self.pyramid_levels > max_levels:
                raise ValueError(
                    f"{self.pyramid_levels} pyramid levels is too deep for a {shape} frame "
                    f"(max {max_levels})"
                )
        return self

    def replace(self, **changes) -> "SolverConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SolverConfig(**d)

    def with_weights(self, **changes) -> "SolverConfig":
        return self.replace(weights=self.weights.replace(**changes))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["adaptive_moments"] = list(self.adaptive_moments)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver config fields: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "adaptive_moments" in d:
            d["adaptive_moments"] = tuple(float(x) for x in d["adaptive_moments"])
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class TraceEntry:
    iteration: int
    level: int
    loss: LossBreakdown
    stage: str = "fit"


@dataclass
class SolveReport:
    displacement: DisplacementField
    trace: list[TraceEntry] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False

    def trace_rows(self):
        for t in self.trace:
            l = t.loss
            yield (t.iteration, t.level, l.data, l.s1, l.s2, l.vd, l.vs, l.total, t.stage)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.trace_rows():
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:-1]] + [row[-1]])
        return buf.getvalue()

    def level_totals(self, level: int, stage: str = "fit") -> np.ndarray:
        """Loss totals of one level of one stage, in iteration order."""
        return np.array([t.loss.total for t in self.trace if t.level == level and t.stage == stage])

    def segments(self):
        """``(level, stage)`` of every optimization run, in the order they ran."""
        seen = []
        for t in self.trace:
            if not seen or seen[-1] != (t.level, t.stage):
                seen.append((t.level, t.stage))
        return seen


# -- initialization ------------------------------------------------------------


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    return float(np.sum(a * b) / den) if den > 0 else -1.0


def axial_seed(i1, i2, block=(16, 8), max_shift: int = 8, median: int = 3) -> DisplacementField:
    """Integer axial shifts from block-wise normalized cross-correlation.

    For each block of ``i1`` the best-matching axially shifted block of
    ``i2`` gives an integer shift. The block shifts are median filtered,
    then interpolated back to pixels from the block centres. The lateral
    seed is zero.
    """
    a = i1.samples if isinstance(i1, RfFrame) else np.asarray(i1, dtype=np.float64)
    b = i2.samples if isinstance(i2, RfFrame) else np.asarray(i2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    bh, bw = min(block[0], h), min(block[1], w)
    starts_r = list(range(0, h - bh + 1, max(bh // 2, 1)))
    starts_c = list(range(0, w - bw + 1, max(bw // 2, 1)))
    shifts = np.zeros((len(starts_r), len(starts_c)))
    for i, r in enumerate(starts_r):
        for j, c in enumerate(starts_c):
            best, best_k = -np.inf, 0
            # search outward from zero so ties favour the smallest shift
            for k in sorted(range(-max_shift, max_shift + 1), key=lambda k: (abs(k), k)):
                # near the frame edge, compare the part that stays inside
                lo, hi = max(r, -k), min(r + bh, h - k)
                if hi - lo < (bh + 1) // 2:
                    continue
                score = _ncc(a[lo:hi, c : c + bw], b[lo + k : hi + k, c : c + bw])
                if score > best + 1e-12:
                    best, best_k = score, k
            shifts[i, j] = best_k
    if median > 1:
        shifts = ndimage.median_filter(shifts, size=median, mode="nearest")
    centres_r = np.array(starts_r) + (bh - 1) / 2
    centres_c = np.array(starts_c) + (bw - 1) / 2
    # fractional block index of every pixel, clamped to the outermost centres
    fr = np.interp(np.arange(h), centres_r, np.arange(len(starts_r)))
    fc = np.interp(np.arange(w), centres_c, np.arange(len(starts_c)))
    rr, cc = np.meshgrid(fr, fc, indexing="ij")
    w1 = ndimage.map_coordinates(shifts, [rr, cc], order=1, mode="nearest")
    return DisplacementField(w1, np.zeros_like(w1))


def lateral_seed_from_epr(d: DisplacementField, v: float, stencil="central") -> DisplacementField:
    """Replace ``w2`` by the lateral field implied by ``e22 = -v * e11``.

    ``e22`` is integrated along each row; the row means of the old ``w2``
    are kept so the seed does not shift the field laterally.
    """
    e11 = strain_from_displacement(d, stencil).e11
    w2 = np.cumsum(-v * e11, axis=1) * d.spacing[1]
    w2 += (d.w2.mean(axis=1) - w2.mean(axis=1))[:, None]
    return DisplacementField(d.w1, w2, d.spacing)


# -- pyramid -----------------------------------------------------------------


#: Pre-decimation blur; wide enough to suppress the RF carrier, so coarse
#: levels match on the envelope and the fine level adds the phase.
PYRAMID_SIGMA = 2.0


def _downsample(stack: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(stack, sigma=(0, PYRAMID_SIGMA, PYRAMID_SIGMA), mode="nearest")
    return blurred[:, ::2, ::2]


def build_pyramid(stack: np.ndarray, levels: int) -> list[np.ndarray]:
    """Finest level first."""
    pyr = [stack]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _resample(field_: np.ndarray, shape) -> np.ndarray:
    """Bilinear resampling, aligning pixel centres of the two grids."""
    h, w = field_.shape
    fr = (np.arange(shape[0]) + 0.5) * h / shape[0] - 0.5
    fc = (np.arange(shape[1]) + 0.5) * w / shape[1] - 0.5
    rr, cc = np.meshgrid(fr, fc, indexing="ij")
    return ndimage.map_coordinates(field_, [rr, cc], order=1, mode="nearest")


def _rescale_field(d: DisplacementField, shape, spacing) -> DisplacementField:
    # values are physical, so only the grid changes (pixel values scale by 2)
    return DisplacementField(_resample(d.w1, shape), _resample(d.w2, shape), spacing)


# -- main loop -----------------------------------------------------------------


def _run_level(a, b, d, cfg: SolverConfig, level: int, report: SolveReport, stage: str = "fit"):
    wt = cfg.weights
    stencil = DerivativeStencil(cfg.stencil)
    b1, b2, eps = cfg.adaptive_moments
    base = cfg.step_size * (2**level)
    step, min_step = base, base * MIN_STEP_FRACTION
    m1 = np.zeros((2,) + d.shape)
    m2 = np.zeros((2,) + d.shape)
    t = 0
    br, g1, g2 = loss_and_gradient(a, b, d, wt, cfg.epr_floor, stencil)
    initial_total = br.total
    report.trace.append(TraceEntry(len(report.trace), level, br, stage))
    history = [br.total]
    for it in range(cfg.iterations_per_level):
        # the refine stage starts from a non-flat seed and needs no warm-up
        warmup = stage == "fit" and it < WARMUP_ITERATIONS
        g = np.stack([g1, g2])
        t += 1
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        upd = (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + eps)
        state = freeze_state(a, b, d, wt, cfg.epr_floor, stencil)
        tol = ACCEPT_RTOL * abs(br.total)
        while True:
            trial = DisplacementField(d.w1 - step * upd[0], d.w2 - step * upd[1], d.spacing)
            frozen_total = total_loss(a, b, trial, wt, cfg.epr_floor, stencil, state).total
            nbr, ng1, ng2 = loss_and_gradient(a, b, trial, wt, cfg.epr_floor, stencil)
            blown = not np.isfinite(nbr.total) or nbr.total > 10 * max(initial_total, 1e-300)
            descent = frozen_total <= br.total and nbr.total <= br.total + tol
            accepted = not blown and (warmup or descent)
            if accepted or step < min_step:
                break
            step *= 0.5
        if not accepted:
            if blown:
                raise DivergenceError(
                    f"loss {nbr.total:.4g} exceeds 10x the level's initial "
                    f"{initial_total:.4g} even at the smallest step (level {level})",
                    report,
                )
            if t == 1:
                # even a fresh sign-like step does not descend
                return d, True
            # stale momentum can point uphill; restart the moment estimates
            m1[:] = 0.0
            m2[:] = 0.0
            t = 0
            step = base
            continue
        d, br, g1, g2 = trial, nbr, ng1, ng2
        report.trace.append(TraceEntry(len(report.trace), level, br, stage))
        history.append(br.total)
        if len(history) > 10:
            ref = history[-11]
            if abs(ref - br.total) <= cfg.convergence_tol * max(abs(ref), 1e-300):
                return d, True
    return d, False


def solve(i1: RfFrame, i2: RfFrame, cfg: SolverConfig = SolverConfig(),
          init: DisplacementField | None = None) -> SolveReport:
    """Estimate the displacement taking ``i1`` onto ``i2``.

    Raises :class:`DivergenceError` when the loss exceeds ten times its
    initial value.
    """
    if i1.shape != i2.shape:
        raise ValueError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    cfg.validate(i1.shape)
    t0 = time.perf_counter()
    c1 = build_channels(i1)
    c2 = build_channels(i2, norm=c1.scale)
    pyr1 = build_pyramid(c1.stack(), cfg.pyramid_levels)
    pyr2 = build_pyramid(c2.stack(), cfg.pyramid_levels)

    if init is not None:
        d = init
    elif cfg.init == "axial-seed":
        d = axial_seed(i1, i2)
    else:
        d = DisplacementField.zeros(i1.shape)

    report = SolveReport(d)
    fit_cfg = cfg.with_weights(lambda_v=0.0)
    for level in range(cfg.pyramid_levels - 1, -1, -1):
        a, b = pyr1[level], pyr2[level]
        d = _rescale_field(d, a.shape[1:], (2.0**level, 2.0**level))
        d, _ = _run_level(a, b, d, fit_cfg, level, report, "fit")
        log.debug("fit level %d done, total %.6g", level, report.trace[-1].loss.total)

    # the EPR term is only informative once the axial strain has converged; the
    # seed encodes the same prior, so it is skipped when that term is off
    if cfg.lateral_seed_epr is not None and cfg.weights.lambda_v > 0:
        d = lateral_seed_from_epr(d, cfg.lateral_seed_epr, cfg.stencil)
    d, converged = _run_level(pyr1[0], pyr2[0], d, cfg, 0, report, "refine")
    report.displacement = d
    report.converged = converged
    report.wall_time = time.perf_counter() - t0
    return report
