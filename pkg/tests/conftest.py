"""Shared oracles and fixtures.

The gradient oracle is central finite differences computed in float64 on
top of the float32 forward path, kept fully independent of the tape.
"""

from __future__ import annotations

import numpy as np
import pytest


def finite_diff_grads(f, arrays, h=1e-3):
    """Central finite-difference gradients of scalar ``f()`` w.r.t. ``arrays``.

    ``arrays`` are the float32 numpy buffers that ``f`` reads; each entry is
    perturbed in place one element at a time. Differencing is done in
    float64.
    """
    grads = []
    for arr in arrays:
        flat = arr.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = float(flat[i])
            flat[i] = np.float32(orig + h)
            f_plus = float(f())
            flat[i] = np.float32(orig - h)
            f_minus = float(f())
            flat[i] = np.float32(orig)
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(arr.shape))
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, floor=1e-4):
    """Scaled infinity-norm gradient comparison.

    ``floor`` guards the denominator when the true gradient is tiny.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    scale = max(float(np.max(np.abs(numeric))), floor)
    err = float(np.max(np.abs(analytic - numeric))) / scale
    assert err < rtol, f"gradient mismatch: scaled max err {err:.3e} >= {rtol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_splat(features, flows, rels, alpha=-20.0, eps=1e-8, clamp=(-50.0, 50.0)):
    """Dense quadruple-loop splat oracle in float64: loops (p, i, q).

    Returns (normalized output, denominator). Independent of the sparse
    scatter implementation.
    """
    n = len(features)
    c, h, w = features[0].shape
    num = np.zeros((c, h, w), dtype=np.float64)
    den = np.zeros((h, w), dtype=np.float64)
    for py in range(h):
        for px in range(w):
            for i in range(n):
                for qy in range(h):
                    for qx in range(w):
                        ux = px - (qx + float(flows[i][0, qy, qx]))
                        uy = py - (qy + float(flows[i][1, qy, qx]))
                        b = max(0.0, 1.0 - abs(ux)) * max(0.0, 1.0 - abs(uy))
                        if b <= 0.0:
                            continue
                        arg = min(max(alpha * float(rels[i][0, qy, qx]), clamp[0]), clamp[1])
                        wgt = b * np.exp(arg)
                        den[py, px] += wgt
                        num[:, py, px] += wgt * features[i][:, qy, qx].astype(np.float64)
    return num / (den + eps), den


def brute_force_quality(flows, rels, alpha=-20.0, clamp=(-50.0, 50.0)):
    """Max-contributor-weight oracle, float32-disciplined so the maximum is
    taken over bitwise-identical candidate values as the implementation."""
    _, h, w = flows[0].shape
    f32 = np.float32
    best = np.zeros((h, w), dtype=np.float32)
    for i in range(len(flows)):
        weight = np.exp(np.clip(f32(alpha) * rels[i][0].astype(f32), clamp[0], clamp[1]))
        for qy in range(h):
            for qx in range(w):
                tx = f32(f32(qx) + f32(flows[i][0, qy, qx]))
                ty = f32(f32(qy) + f32(flows[i][1, qy, qx]))
                x0, y0 = int(np.floor(tx)), int(np.floor(ty))
                fx, fy = f32(tx - f32(x0)), f32(ty - f32(y0))
                for px, bx in ((x0, f32(1.0) - fx), (x0 + 1, fx)):
                    for py, by in ((y0, f32(1.0) - fy), (y0 + 1, fy)):
                        if not (0 <= px < w and 0 <= py < h):
                            continue
                        val = f32(f32(bx * by) * weight[qy, qx])
                        if val > best[py, px]:
                            best[py, px] = val
    return best[None]
