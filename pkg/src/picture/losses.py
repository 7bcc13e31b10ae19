"""The unsupervised elastography objective and its analytic gradient.

    total = data + lambda_s * (s1 + gamma * s2) + lambda_v * (vd + lambda_vs * vs)

* ``data``: windowed L1 photometric difference between the pre-compression
  frame and the bilinearly warped post-compression frame.
* ``s1``, ``s2``: first- and second-order strain smoothness.
* ``vd``: RMS of ``M * (e22 + <ve> * e11)`` where ``M`` marks pixels whose
  effective Poisson's ratio ``ve`` is outside the accepted range and
  ``<ve>`` is the mean in-range EPR.
* ``vs``: L1 smoothness of ``ve``.

All norms are means over pixels so the weights do not depend on grid size.
The gradient treats the EPR mask, ``<ve>`` and the warp validity as
constants; pass a :class:`FrozenState` to evaluate the loss under the same
convention (needed for finite-difference checks).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .elasticity import (
    EPR_FALLBACK,
    EPR_FLOOR,
    DerivativeStencil,
    DisplacementField,
    EprField,
    EprRange,
    ShapeError,
    StrainField,
    diff,
    diff_adjoint,
    epr,
    epr_mask,
    mean_epr_in_range,
    strain_from_displacement,
)
from .signal_proc import MultiChannelFrame


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_v: float = 1.0
    lambda_vs: float = 0.1
    gamma: float = 1.0
    beta: float = 0.1
    window_n: int = 3
    epr_range: EprRange = EprRange()
    squared_vd: bool = False

    def __post_init__(self):
        for name in ("lambda_s", "lambda_v", "lambda_vs", "gamma", "beta"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {val}")
        if int(self.window_n) != self.window_n or self.window_n < 1 or self.window_n % 2 == 0:
            raise ValueError(f"window_n must be an odd integer >= 1, got {self.window_n}")

    def replace(self, **changes) -> "LossWeights":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return LossWeights(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epr_range"] = [self.epr_range.ve_min, self.epr_range.ve_max]
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weight fields: {sorted(unknown)}")
        if "epr_range" in d:
            r = d["epr_range"]
            d["epr_range"] = EprRange(**r) if isinstance(r, dict) else EprRange(*r)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LossWeights":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LossBreakdown:
    data: float
    s1: float
    s2: float
    vd: float
    vs: float
    total: float
    mean_epr: float
    masked_fraction: float


class PictureTerms(NamedTuple):
    vd: float
    vs: float
    mean_epr: float
    masked_fraction: float


@dataclass(frozen=True)
class FrozenState:
    """Piecewise-constant parts of the objective, held fixed for a gradient."""

    warp_valid: np.ndarray
    epr_valid: np.ndarray
    mask: np.ndarray
    mean_epr: float


def _stack(frame) -> np.ndarray:
    if isinstance(frame, MultiChannelFrame):
        return frame.stack()
    arr = np.asarray(frame, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def _check_shapes(*shapes):
    if len(set(shapes)) != 1:
        raise ShapeError(f"shape mismatch: {shapes}")


# -- warping -----------------------------------------------------------------


def _warp_stack(img: np.ndarray, d: DisplacementField, want_grad: bool = False):
    """Bilinear samples of ``img`` (channels, rows, cols) at ``p + d(p)``.

    Returns ``(warped, valid, d_dy, d_dx)`` where the last two are the
    derivatives with respect to the sample position in pixels (``None``
    unless ``want_grad``).
    """
    h, w = img.shape[-2:]
    y = np.arange(h, dtype=np.float64)[:, None] + d.w1 / d.spacing[0]
    x = np.arange(w, dtype=np.float64)[None, :] + d.w2 / d.spacing[1]
    yc = np.clip(y, 0.0, h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    valid = (y == yc) & (x == xc)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    fy = yc - y0
    fx = xc - x0
    i00 = img[:, y0, x0]
    i10 = img[:, y0 + 1, x0]
    i01 = img[:, y0, x0 + 1]
    i11 = img[:, y0 + 1, x0 + 1]
    gy, gx = 1.0 - fy, 1.0 - fx
    out = i00 * (gy * gx) + i10 * (fy * gx) + i01 * (gy * fx) + i11 * (fy * fx)
    if not want_grad:
        return out, valid, None, None
    d_dy = gx * (i10 - i00) + fx * (i11 - i01)
    d_dx = gy * (i01 - i00) + fy * (i11 - i10)
    # clamped coordinates do not move with the displacement
    d_dy *= y == yc
    d_dx *= x == xc
    return out, valid, d_dy, d_dx


def warp(frame: MultiChannelFrame, d: DisplacementField) -> tuple[MultiChannelFrame, np.ndarray]:
    """Warp every channel of ``frame`` by ``d``.

    Returns the warped frame and a boolean raster that is False where the
    sample position fell outside the frame (those samples are clamped).
    """
    _check_shapes(frame.shape, d.shape)
    out, valid, _, _ = _warp_stack(frame.stack(), d)
    return MultiChannelFrame.from_stack(out, frame.scale), valid


# -- data term ---------------------------------------------------------------


def box_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum over an ``n x n`` window (truncated at the border) on the last two axes."""
    r = n // 2
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(a, pad)
    rows = p[..., 0:h, :].copy()
    for k in range(1, n):
        rows += p[..., k : k + h, :]
    out = rows[..., 0:w].copy()
    for k in range(1, n):
        out += rows[..., k : k + w]
    return out


def _data_term(i1, i2, d, n, warp_valid=None, want_grad=False):
    warped, valid, d_dy, d_dx = _warp_stack(i2, d, want_grad)
    if warp_valid is not None:
        valid = warp_valid
    resid = warped - i1
    nv = box_sum(valid.astype(np.float64), n)
    good = nv > 0
    ngood = np.count_nonzero(good)
    if ngood == 0:
        z = np.zeros(d.shape)
        return 0.0, z, z.copy()
    nchan = i1.shape[0]
    win = box_sum(np.abs(resid) * valid, n)
    inv_nv = np.zeros_like(nv)
    np.divide(1.0, nv, out=inv_nv, where=good)
    value = float(np.sum(win * inv_nv) / (nchan * ngood))
    if not want_grad:
        return value, None, None
    omega = valid * box_sum(inv_nv, n) / (nchan * ngood)
    g = omega * np.sign(resid)
    g1 = np.sum(g * d_dy, axis=0) / d.spacing[0]
    g2 = np.sum(g * d_dx, axis=0) / d.spacing[1]
    return value, g1, g2


def data_loss(i1, i2, d: DisplacementField, n: int = 3) -> float:
    """Windowed L1 difference between ``i1`` and ``i2`` warped by ``d``.

    Each pixel's absolute difference is averaged over an ``n x n`` window
    (truncated at borders, out-of-bounds warp samples left out), then
    averaged over pixels and channels.
    """
    if n < 1 or n % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    a, b = _stack(i1), _stack(i2)
    _check_shapes(a.shape, b.shape, (a.shape[0],) + d.shape)
    return _data_term(a, b, d, n)[0]


# -- strain regularizers ------------------------------------------------------


def _smooth_terms(s: StrainField, wt: LossWeights, stencil, spacing, want_grad):
    sa, sl = spacing
    beta = wt.beta
    npx = s.e11.size
    dev = s.e11 - np.mean(s.e11)
    s1 = (np.mean(np.abs(dev)) + beta * np.mean(np.abs(s.e12))
          + 0.5 * np.mean(np.abs(s.e21)) + 0.5 * beta * np.mean(np.abs(s.e22)))
    d11a = diff(s.e11, 0, stencil) / sa
    d11l = diff(s.e11, 1, stencil) / sl
    d22a = diff(s.e22, 0, stencil) / sa
    d22l = diff(s.e22, 1, stencil) / sl
    s2 = (np.mean(np.abs(d11a)) + beta * np.mean(np.abs(d11l))
          + 0.5 * np.mean(np.abs(d22a)) + 0.5 * beta * np.mean(np.abs(d22l)))
    if not want_grad:
        return float(s1), float(s2), None, None
    sg = np.sign(dev)
    g1 = {
        "e11": (sg - np.mean(sg)) / npx,
        "e12": beta * np.sign(s.e12) / npx,
        "e21": 0.5 * np.sign(s.e21) / npx,
        "e22": 0.5 * beta * np.sign(s.e22) / npx,
    }
    g2 = {
        "e11": (diff_adjoint(np.sign(d11a), 0, stencil) / sa
                + beta * diff_adjoint(np.sign(d11l), 1, stencil) / sl) / npx,
        "e22": (0.5 * diff_adjoint(np.sign(d22a), 0, stencil) / sa
                + 0.5 * beta * diff_adjoint(np.sign(d22l), 1, stencil) / sl) / npx,
    }
    return float(s1), float(s2), g1, g2


def smoothness_loss(s: StrainField, weights: LossWeights = LossWeights(),
                    stencil=DerivativeStencil.CENTRAL, spacing=(1.0, 1.0)) -> tuple[float, float]:
    s1, s2, _, _ = _smooth_terms(s, weights, stencil, spacing, False)
    return s1, s2


def _valid_diff_coeffs(valid: np.ndarray, stencil):
    """Stencil weights for differentiating a field defined only on ``valid``.

    Along axis 0: ``deriv = cm * f[i-1] + c0 * f[i] + cp * f[i+1]``. Falls
    back to a one-sided difference when a neighbour is invalid; pixels with
    no valid neighbour have all-zero weights and ``used`` False.
    """
    nxt = np.zeros_like(valid)
    prv = np.zeros_like(valid)
    nxt[:-1] = valid[1:] & valid[:-1]
    prv[1:] = valid[:-1] & valid[1:]
    if DerivativeStencil(stencil) is DerivativeStencil.CENTRAL:
        both = nxt & prv
        only_n = nxt & ~prv
        only_p = prv & ~nxt
        cp = 0.5 * both + 1.0 * only_n
        cm = -0.5 * both - 1.0 * only_p
        c0 = -1.0 * only_n + 1.0 * only_p
    else:
        back = prv & ~nxt
        cp = 1.0 * nxt
        cm = -1.0 * back
        c0 = -1.0 * nxt + 1.0 * back
    return cm, c0, cp, nxt | prv


def _apply_coeffs(f, cm, c0, cp):
    out = c0 * f
    out[:-1] += cp[:-1] * f[1:]
    out[1:] += cm[1:] * f[:-1]
    return out


def _apply_coeffs_adjoint(g, cm, c0, cp):
    out = c0 * g
    out[1:] += cp[:-1] * g[:-1]
    out[:-1] += cm[1:] * g[1:]
    return out


def _valid_derivative_l1(ve, valid, axis, stencil, want_grad):
    """Mean ``|d ve / d axis|`` over pixels with a valid neighbour, and its gradient."""
    f = np.moveaxis(ve, axis, 0)
    v = np.moveaxis(valid, axis, 0)
    cm, c0, cp, used = _valid_diff_coeffs(v, stencil)
    nused = np.count_nonzero(used)
    if nused == 0:
        return 0.0, (np.zeros_like(ve) if want_grad else None)
    der = _apply_coeffs(f, cm, c0, cp)
    value = float(np.sum(np.abs(der)) / nused)
    if not want_grad:
        return value, None
    g = _apply_coeffs_adjoint(np.sign(der) / nused, cm, c0, cp)
    return value, np.moveaxis(g, 0, axis)


def _picture_terms(s: StrainField, wt: LossWeights, floor, stencil, spacing,
                   state: FrozenState | None, want_grad):
    sa, sl = spacing
    if state is None:
        ef = epr(s, floor)
        mask = epr_mask(ef, wt.epr_range)
        mean_ve = mean_epr_in_range(ef, mask)
        valid = ef.valid
        ve = ef.ve
    else:
        valid, mask, mean_ve = state.epr_valid, state.mask, state.mean_epr
        ve = np.zeros(s.shape)
        np.divide(-s.e22, s.e11, out=ve, where=valid & (s.e11 != 0))
    npx = s.e11.size
    q = mask * (s.e22 + mean_ve * s.e11)
    ms = float(np.mean(q * q))
    vd = ms if wt.squared_vd else float(np.sqrt(ms))
    va, ga = _valid_derivative_l1(ve, valid, 0, stencil, want_grad)
    vl, gl = _valid_derivative_l1(ve, valid, 1, stencil, want_grad)
    vs = va / sa + wt.beta * vl / sl
    terms = PictureTerms(vd, float(vs), float(mean_ve), float(np.mean(mask)))
    if not want_grad:
        return terms, None, None
    if wt.squared_vd:
        gq = 2.0 * q / npx
    elif vd > 0:
        gq = q / (npx * vd)
    else:
        gq = np.zeros_like(q)
    g22 = mask * gq
    g11 = mean_ve * g22
    g_ve = (ga / sa + wt.beta * gl / sl) * wt.lambda_vs
    safe = valid & (s.e11 != 0)
    e11 = np.where(safe, s.e11, 1.0)
    g11 = g11 + np.where(safe, g_ve * s.e22 / (e11 * e11), 0.0)
    g22 = g22 + np.where(safe, -g_ve / e11, 0.0)
    return terms, g11, g22


def picture_loss(s: StrainField, weights: LossWeights = LossWeights(), floor: float = EPR_FLOOR,
                 stencil=DerivativeStencil.CENTRAL, spacing=(1.0, 1.0)) -> PictureTerms:
    """EPR range and EPR smoothness penalties for a strain field."""
    return _picture_terms(s, weights, floor, stencil, spacing, None, False)[0]


# -- full objective -----------------------------------------------------------


def freeze_state(i1, i2, d: DisplacementField, weights: LossWeights = LossWeights(),
                 floor: float = EPR_FLOOR, stencil=DerivativeStencil.CENTRAL) -> FrozenState:
    b = _stack(i2)
    _, warp_valid, _, _ = _warp_stack(b, d)
    s = strain_from_displacement(d, stencil)
    ef = epr(s, floor)
    mask = epr_mask(ef, weights.epr_range)
    return FrozenState(warp_valid, ef.valid, mask, mean_epr_in_range(ef, mask))


def _evaluate(i1, i2, d, weights, floor, stencil, state, want_grad):
    a, b = _stack(i1), _stack(i2)
    _check_shapes(a.shape, b.shape, (a.shape[0],) + d.shape)
    wt = weights
    st = DerivativeStencil(stencil)
    warp_valid = None if state is None else state.warp_valid
    data, gd1, gd2 = _data_term(a, b, d, wt.window_n, warp_valid, want_grad)
    s = strain_from_displacement(d, st)
    s1, s2, gs1, gs2 = _smooth_terms(s, wt, st, d.spacing, want_grad)
    # skip the EPR gradient entirely when the term is switched off
    pic, g11, g22 = _picture_terms(s, wt, floor, st, d.spacing, state,
                                   want_grad and wt.lambda_v > 0)
    total = data + wt.lambda_s * (s1 + wt.gamma * s2) + wt.lambda_v * (pic.vd + wt.lambda_vs * pic.vs)
    br = LossBreakdown(float(data), s1, s2, pic.vd, pic.vs, float(total), pic.mean_epr,
                       pic.masked_fraction)
    if not want_grad:
        return br, None, None

    ge = {k: wt.lambda_s * gs1[k] for k in ("e11", "e12", "e21", "e22")}
    ge["e11"] += wt.lambda_s * wt.gamma * gs2["e11"]
    ge["e22"] += wt.lambda_s * wt.gamma * gs2["e22"]
    if wt.lambda_v > 0:
        ge["e11"] += wt.lambda_v * g11
        ge["e22"] += wt.lambda_v * g22
    sa, sl = d.spacing
    g1 = gd1 + diff_adjoint(ge["e11"], 0, st) / sa + diff_adjoint(ge["e12"], 1, st) / sl
    g2 = gd2 + diff_adjoint(ge["e21"], 0, st) / sa + diff_adjoint(ge["e22"], 1, st) / sl
    return br, g1, g2


def total_loss(i1, i2, d: DisplacementField, weights: LossWeights = LossWeights(),
               floor: float = EPR_FLOOR, stencil=DerivativeStencil.CENTRAL,
               state: FrozenState | None = None) -> LossBreakdown:
    """Evaluate every term of the objective.

    With ``state`` given, the EPR mask, in-range mean EPR, EPR validity and
    warp validity are taken from it instead of being recomputed from ``d``.
    """
    return _evaluate(i1, i2, d, weights, floor, stencil, state, False)[0]


def loss_and_gradient(i1, i2, d: DisplacementField, weights: LossWeights = LossWeights(),
                      floor: float = EPR_FLOOR, stencil=DerivativeStencil.CENTRAL,
                      state: FrozenState | None = None):
    """``(LossBreakdown, grad_w1, grad_w2)`` in one pass.

    L1 terms use ``sign`` as subgradient (zero at zero).
    """
    return _evaluate(i1, i2, d, weights, floor, stencil, state, True)


def loss_gradient(i1, i2, d: DisplacementField, weights: LossWeights = LossWeights(),
                  floor: float = EPR_FLOOR, stencil=DerivativeStencil.CENTRAL,
                  state: FrozenState | None = None) -> tuple[np.ndarray, np.ndarray]:
    _, g1, g2 = _evaluate(i1, i2, d, weights, floor, stencil, state, True)
    return g1, g2
