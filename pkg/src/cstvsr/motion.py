"""Backward warping and flow reliability metrics.

Reliability of a flow pair is summarized by three per-pixel cues: the
intensity warping error, the forward-backward flow consistency residual,
and the local variance of the flow. Stacked and robustly normalized they
form the 3-channel map consumed by the motion encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import FlowField
from .tensor import Tensor, make_op

_EPS_SCALE = 1e-8


@dataclass
class ReliabilityMap:
    raw: Tensor  # [3, H, W]; channels [intensity_warp_err, flow_warp_err, local_flow_variance]
    fused: Tensor | None = None  # [1, H, W] predicted scalar, filled by the pipeline


def _flow_parts(flow):
    if isinstance(flow, FlowField):
        return np.asarray(flow.data, dtype=np.float32), None
    if isinstance(flow, Tensor):
        return flow.data, flow
    return np.asarray(flow, dtype=np.float32), None


def _bilinear_setup(data: np.ndarray, fx: np.ndarray, fy: np.ndarray):
    """Shared gather geometry: corner indices, weights, and clamp masks."""
    _, h, w = data.shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    px = jj + fx
    py = ii + fy
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0).astype(np.float32)
    wy = (py - y0).astype(np.float32)
    corners = (
        (y0 * w + x0, (1 - wy) * (1 - wx)),
        (y0 * w + x1, (1 - wy) * wx),
        (y1 * w + x0, wy * (1 - wx)),
        (y1 * w + x1, wy * wx),
    )
    return corners, (x0, x1, y0, y1, wx, wy, inside_x, inside_y)

def _gather(data: np.ndarray, corners) -> np.ndarray:
    c, h, w = data.shape
    flat = data.reshape(c, h * w)
    out = np.zeros((c, h, w), dtype=np.float32)
    for idx, weight in corners:
        out += weight[None] * flat[:, idx.ravel()].reshape(c, h, w)
    return out


def backward_warp(x, flow):
    """Sample ``x`` at p + flow(p) with bilinear weights, clamped at borders.

    Differentiable w.r.t. both inputs when they are Tensors on an active
    tape; a FlowField or plain array flow is treated as constant.
    """
    x_t = x if isinstance(x, Tensor) else Tensor(x)
    flow_data, flow_t = _flow_parts(flow)
    if flow_data.shape != (2,) + x_t.data.shape[1:]:
        raise ValueError(
            f"flow shape {flow_data.shape} does not match frame shape {x_t.data.shape}"
        )
    corners, geom = _bilinear_setup(x_t.data, flow_data[0], flow_data[1])
    out = _gather(x_t.data, corners)

    data = x_t.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        c, h, w = data.shape
        acc = np.zeros((h * w, c), dtype=np.float32)
        g_hwc = np.moveaxis(g, 0, -1).reshape(h * w, c)
        for idx, weight in corners:
            np.add.at(acc, idx.ravel(), g_hwc * weight.reshape(-1, 1))
        return np.moveaxis(acc.reshape(h, w, c), -1, 0)

    def vjp_flow(g: np.ndarray) -> np.ndarray:
        x0, x1, y0, y1, wx, wy, inside_x, inside_y = geom
        c, h, w = data.shape
        flat = data.reshape(c, h * w)

        def at(yy, xx):
            return flat[:, (yy * w + xx).ravel()].reshape(c, h, w)

        ddx = (1 - wy)[None] * (at(y0, x1) - at(y0, x0)) + wy[None] * (
            at(y1, x1) - at(y1, x0)
        )
        ddy = (1 - wx)[None] * (at(y1, x0) - at(y0, x0)) + wx[None] * (
            at(y1, x1) - at(y0, x1)
        )
        gx = (g * ddx).sum(axis=0) * inside_x
        gy = (g * ddy).sum(axis=0) * inside_y
        return np.stack([gx, gy]).astype(np.float32)

    inputs = [(x_t, vjp_x)]
    if flow_t is not None:
        inputs.append((flow_t, vjp_flow))
    return make_op(out, inputs)


def intensity_warping_error(frame0, frame1, flow01) -> Tensor:
    """Mean over channels of |frame0(p) - frame1(p + flow01(p))|, as [1,H,W]."""
    f0 = frame0 if isinstance(frame0, Tensor) else Tensor(frame0)
    warped = backward_warp(frame1, flow01)
    diff = (f0 - warped).abs()
    c = diff.data.shape[0]
    return diff.sum(axis=0, keepdims=True) / float(c)


def flow_warping_error(flow01, flow10) -> Tensor:
    """Forward-backward residual ||flow01(p) + flow10(p + flow01(p))||_2 as [1,H,W].

    The norm is smoothed as sqrt(s + eps^2) - eps, which is exact at zero
    (a static scene reports 0, not eps) yet keeps the gradient finite there.
    """
    d01, t01 = _flow_parts(flow01)
    f01 = t01 if t01 is not None else Tensor(d01)
    f10 = flow10 if isinstance(flow10, Tensor) else Tensor(_flow_parts(flow10)[0])
    pulled = backward_warp(f10, f01 if t01 is not None else d01)
    v = f01 + pulled
    eps = 1e-6
    return (v.square().sum(axis=0, keepdims=True) + eps * eps).sqrt() - eps


def local_flow_variance(flow, window: int = 3) -> Tensor:
    """Windowed variance of each flow component, summed, reflected padding.

    Treated as a constant input feature: no gradient flows through it.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    data, _ = _flow_parts(flow)
    pad = window // 2
    out = np.zeros((1,) + data.shape[1:], dtype=np.float32)
    for comp in data:
        padded = np.pad(comp, pad, mode="reflect").astype(np.float64)
        win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
        mean = win.mean(axis=(2, 3))
        mean_sq = (win * win).mean(axis=(2, 3))
        out[0] += (mean_sq - mean * mean).astype(np.float32)
    return Tensor(np.maximum(out, 0.0))


def _robust_normalize(channel: np.ndarray) -> np.ndarray:
    med = np.median(channel)
    mad = np.median(np.abs(channel - med))
    scale = med + 3.0 * mad
    return np.clip(channel / max(scale, _EPS_SCALE), 0.0, 5.0).astype(np.float32)


def assemble_reliability(frame0, frame1, flow01, flow10, window: int = 3) -> ReliabilityMap:
    """Stack the three metrics into the fixed channel order, robustly scaled.

    Each channel is divided by its own median + 3*MAD and clamped to [0, 5]
    so the motion encoder sees scale-stable inputs across scenes. The
    assembly is a constant-feature path: gradients are not propagated.
    """
    intensity = intensity_warping_error(frame0, frame1, flow01)
    consistency = flow_warping_error(flow01, flow10)
    variance = local_flow_variance(flow01, window=window)
    raw = np.concatenate(
        [
            _robust_normalize(intensity.data),
            _robust_normalize(consistency.data),
            _robust_normalize(variance.data),
        ]
    )
    return ReliabilityMap(raw=Tensor(raw))
