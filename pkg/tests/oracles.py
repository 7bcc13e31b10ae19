"""Brute-force reference implementations used only by the tests.

Everything here is written with explicit Python loops over pixels and does
not call into the package, so agreement with the vectorized code is a real
cross-check.
"""

import math

import numpy as np


def _d(f, i, j, axis, stencil):
    """Derivative of the 2D list ``f`` at (i, j), unit spacing."""
    n = len(f) if axis == 0 else len(f[0])
    k = i if axis == 0 else j

    def at(kk):
        return f[kk][j] if axis == 0 else f[i][kk]

    if stencil == "central":
        if k == 0:
            return at(1) - at(0)
        if k == n - 1:
            return at(n - 1) - at(n - 2)
        return (at(k + 1) - at(k - 1)) / 2.0
    if k == n - 1:
        return at(n - 1) - at(n - 2)
    return at(k + 1) - at(k)


def deriv(f, axis, stencil="central"):
    f = np.asarray(f, dtype=float).tolist()
    h, w = len(f), len(f[0])
    return np.array([[_d(f, i, j, axis, stencil) for j in range(w)] for i in range(h)])


def strain(w1, w2, spacing=(1.0, 1.0), stencil="central"):
    sa, sl = spacing
    return {
        "e11": deriv(w1, 0, stencil) / sa,
        "e12": deriv(w1, 1, stencil) / sl,
        "e21": deriv(w2, 0, stencil) / sa,
        "e22": deriv(w2, 1, stencil) / sl,
    }


def bilinear(img, y, x):
    h, w = len(img), len(img[0])
    ok = 0.0 <= y <= h - 1 and 0.0 <= x <= w - 1
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0 = min(int(math.floor(y)), h - 2)
    x0 = min(int(math.floor(x)), w - 2)
    fy, fx = y - y0, x - x0
    v = (img[y0][x0] * (1 - fy) * (1 - fx) + img[y0 + 1][x0] * fy * (1 - fx)
         + img[y0][x0 + 1] * (1 - fy) * fx + img[y0 + 1][x0 + 1] * fy * fx)
    return v, ok


def data_loss(i1, i2, w1, w2, spacing=(1.0, 1.0), n=3):
    i1 = np.asarray(i1, dtype=float)
    i2 = np.asarray(i2, dtype=float)
    if i1.ndim == 2:
        i1, i2 = i1[None], i2[None]
    c, h, w = i1.shape
    w1 = np.asarray(w1, dtype=float).tolist()
    w2 = np.asarray(w2, dtype=float).tolist()
    r = n // 2
    total = 0.0
    for ch in range(c):
        a = i1[ch].tolist()
        b = i2[ch].tolist()
        res = [[0.0] * w for _ in range(h)]
        ok = [[False] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                v, good = bilinear(b, i + w1[i][j] / spacing[0], j + w2[i][j] / spacing[1])
                res[i][j] = abs(a[i][j] - v)
                ok[i][j] = good
        ngood = 0
        acc = 0.0
        for i in range(h):
            for j in range(w):
                s, cnt = 0.0, 0
                for ii in range(i - r, i + r + 1):
                    for jj in range(j - r, j + r + 1):
                        if 0 <= ii < h and 0 <= jj < w and ok[ii][jj]:
                            s += res[ii][jj]
                            cnt += 1
                if cnt:
                    acc += s / cnt
                    ngood += 1
        total += acc / ngood if ngood else 0.0
    return total / c


def _mean_abs(vals):
    return sum(abs(v) for v in vals) / len(vals)


def smoothness(st, beta=0.1, spacing=(1.0, 1.0), stencil="central"):
    sa, sl = spacing
    e11 = np.asarray(st["e11"]).ravel().tolist()
    mean11 = sum(e11) / len(e11)
    s1 = (_mean_abs([v - mean11 for v in e11])
          + beta * _mean_abs(np.ravel(st["e12"]).tolist())
          + 0.5 * _mean_abs(np.ravel(st["e21"]).tolist())
          + 0.5 * beta * _mean_abs(np.ravel(st["e22"]).tolist()))
    s2 = (_mean_abs(np.ravel(deriv(st["e11"], 0, stencil) / sa).tolist())
          + beta * _mean_abs(np.ravel(deriv(st["e11"], 1, stencil) / sl).tolist())
          + 0.5 * _mean_abs(np.ravel(deriv(st["e22"], 0, stencil) / sa).tolist())
          + 0.5 * beta * _mean_abs(np.ravel(deriv(st["e22"], 1, stencil) / sl).tolist()))
    return s1, s2


def epr_fields(st, floor=1e-6, ve_range=(0.1, 0.6)):
    e11 = np.asarray(st["e11"]).tolist()
    e22 = np.asarray(st["e22"]).tolist()
    h, w = len(e11), len(e11[0])
    ve = [[0.0] * w for _ in range(h)]
    valid = [[False] * w for _ in range(h)]
    m = [[1] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            if abs(e11[i][j]) >= floor:
                valid[i][j] = True
                ve[i][j] = -e22[i][j] / e11[i][j]
                if ve_range[0] < ve[i][j] < ve_range[1]:
                    m[i][j] = 0
    return ve, valid, m


def _valid_deriv(ve, valid, i, j, axis, stencil):
    h, w = len(ve), len(ve[0])

    def ok(ii, jj):
        return 0 <= ii < h and 0 <= jj < w and valid[ii][jj]

    di, dj = (1, 0) if axis == 0 else (0, 1)
    nxt = ok(i + di, j + dj)
    prv = ok(i - di, j - dj)
    if stencil == "central" and nxt and prv:
        return (ve[i + di][j + dj] - ve[i - di][j - dj]) / 2.0
    if nxt:
        return ve[i + di][j + dj] - ve[i][j]
    if prv:
        return ve[i][j] - ve[i - di][j - dj]
    return None


def picture(st, beta=0.1, floor=1e-6, ve_range=(0.1, 0.6), spacing=(1.0, 1.0),
            stencil="central", squared=False, fallback=0.35):
    ve, valid, m = epr_fields(st, floor, ve_range)
    e11 = np.asarray(st["e11"]).tolist()
    e22 = np.asarray(st["e22"]).tolist()
    h, w = len(ve), len(ve[0])
    num, den = 0.0, 0
    for i in range(h):
        for j in range(w):
            if m[i][j] == 0:
                num += ve[i][j]
                den += 1
    mean = num / den if den else fallback
    sq = 0.0
    for i in range(h):
        for j in range(w):
            q = m[i][j] * (e22[i][j] + mean * e11[i][j])
            sq += q * q
    vd = sq / (h * w) if squared else math.sqrt(sq / (h * w))
    parts = []
    for axis in (0, 1):
        vals = []
        for i in range(h):
            for j in range(w):
                if valid[i][j]:
                    v = _valid_deriv(ve, valid, i, j, axis, stencil)
                    if v is not None:
                        vals.append(v)
        parts.append(_mean_abs(vals) if vals else 0.0)
    vs = parts[0] / spacing[0] + beta * parts[1] / spacing[1]
    masked = sum(sum(row) for row in m) / (h * w)
    return vd, vs, mean, masked


def total(i1, i2, w1, w2, lambda_s=1.0, lambda_v=1.0, lambda_vs=0.1, gamma=1.0, beta=0.1,
          n=3, floor=1e-6, ve_range=(0.1, 0.6), spacing=(1.0, 1.0), stencil="central"):
    st = strain(w1, w2, spacing, stencil)
    dl = data_loss(i1, i2, w1, w2, spacing, n)
    s1, s2 = smoothness(st, beta, spacing, stencil)
    vd, vs, _, _ = picture(st, beta, floor, ve_range, spacing, stencil)
    return dl + lambda_s * (s1 + gamma * s2) + lambda_v * (vd + lambda_vs * vs)


def l1_arguments(i1, i2, w1, w2, epr_valid, beta=0.1, spacing=(1.0, 1.0), n=3):
    """Every quantity whose sign change is a kink of the objective.

    Vectorized (not loop-based) because the gradient check evaluates it
    twice per displacement component. ``sin(pi * y)`` and ``sin(pi * x)``
    of the sample position change sign exactly at the kinks of the bilinear
    warp.
    """
    sa, sl = spacing
    i1 = np.asarray(i1, dtype=float)
    i2 = np.asarray(i2, dtype=float)
    h, w = w1.shape
    y = np.arange(h)[:, None] + w1 / sa
    x = np.arange(w)[None, :] + w2 / sl
    y0 = np.clip(np.floor(y), 0, h - 2).astype(int)
    x0 = np.clip(np.floor(x), 0, w - 2).astype(int)
    fy = np.clip(y, 0, h - 1) - y0
    fx = np.clip(x, 0, w - 1) - x0
    warped = (i2[:, y0, x0] * (1 - fy) * (1 - fx) + i2[:, y0 + 1, x0] * fy * (1 - fx)
              + i2[:, y0, x0 + 1] * (1 - fy) * fx + i2[:, y0 + 1, x0 + 1] * fy * fx)
    out = [(i1 - warped).ravel(), np.sin(np.pi * y).ravel(), np.sin(np.pi * x).ravel()]

    def g(f, axis):
        return np.gradient(f, axis=axis, edge_order=1)

    e11, e12 = g(w1, 0) / sa, g(w1, 1) / sl
    e21, e22 = g(w2, 0) / sa, g(w2, 1) / sl
    out += [(e11 - e11.mean()).ravel(), e12.ravel(), e21.ravel(), e22.ravel()]
    out += [g(e11, 0).ravel(), g(e11, 1).ravel(), g(e22, 0).ravel(), g(e22, 1).ravel()]
    ve = np.where(epr_valid, -e22 / np.where(e11 == 0, 1.0, e11), 0.0)
    # ve differences between valid neighbours, the kinks of the EPR smoothness term
    for axis in (0, 1):
        a = np.moveaxis(ve, axis, 0)
        v = np.moveaxis(epr_valid, axis, 0)
        pair = v[1:] & v[:-1]
        out.append((a[1:] - a[:-1])[pair])
        both = v[2:] & v[1:-1] & v[:-2]
        out.append((a[2:] - a[:-2])[both])
    return np.concatenate(out)
