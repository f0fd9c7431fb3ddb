"""Reliability-aware softmax splatting over N reference frames.

Each source pixel q of frame i lands at q + flow_i(q) and deposits its
feature into the four surrounding target cells, weighted by the bilinear
kernel times exp(alpha * rel_i(q)). Normalization is joint across all
frames (early fusion): one shared denominator per target cell. The
quality map keeps the largest unnormalized weight per cell instead.

Scatter order is fixed (frame index, then row-major q), so outputs are
bitwise reproducible. Out-of-bounds landings are dropped, not clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op

_SERIAL_EMPTY = np.iinfo(np.int64).max


@dataclass(frozen=True)
class SplatConfig:
    alpha: float = -20.0
    eps_denominator: float = 1e-8
    z_clamp: tuple[float, float] = (-50.0, 50.0)

    def __post_init__(self):
        if not self.alpha < 0:
            raise ValueError(f"alpha must be negative, got {self.alpha}")
        if self.z_clamp[0] >= self.z_clamp[1]:
            raise ValueError(f"bad clamp interval {self.z_clamp}")


def bilinear_kernel(u) -> float:
    """b(u) = max(0, 1-|ux|) * max(0, 1-|uy|); support is the open unit square."""
    ux, uy = u
    return max(0.0, 1.0 - abs(ux)) * max(0.0, 1.0 - abs(uy))


def _unwrap(x):
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float32), None


def _check_lists(features, flows, rels):
    if not (len(flows) == len(rels) and (features is None or len(features) == len(flows))):
        raise ValueError(
            f"list lengths differ: features={None if features is None else len(features)} "
            f"flows={len(flows)} rels={len(rels)}"
        )
    if len(flows) == 0:
        raise ValueError("need at least one reference frame")


class _FrameGeometry:
    """Per-frame landing geometry: corner cells, kernel factors, weights."""

    def __init__(self, flow: np.ndarray, rel: np.ndarray, cfg: SplatConfig):
        _, h, w = flow.shape
        self.h, self.w = h, w
        jj, ii = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
        self.tx = (jj + flow[0]).ravel()
        self.ty = (ii + flow[1]).ravel()
        x0 = np.floor(self.tx).astype(np.int64)
        y0 = np.floor(self.ty).astype(np.int64)
        fx = (self.tx - x0).astype(np.float32)
        fy = (self.ty - y0).astype(np.float32)
        arg = np.clip(cfg.alpha * rel[0].ravel(), cfg.z_clamp[0], cfg.z_clamp[1])
        self.weight = np.exp(arg).astype(np.float32)
        lo, hi = cfg.z_clamp
        raw = cfg.alpha * rel[0].ravel()
        self.clamp_open = ((raw > lo) & (raw < hi)).astype(np.float32)
        # corners: (cell_x, cell_y, bx, by, dbx/dtx, dby/dty)
        self.corners = [
            (x0, y0, 1.0 - fx, 1.0 - fy, -1.0, -1.0),
            (x0 + 1, y0, fx, 1.0 - fy, 1.0, -1.0),
            (x0, y0 + 1, 1.0 - fx, fy, -1.0, 1.0),
            (x0 + 1, y0 + 1, fx, fy, 1.0, 1.0),
        ]

    def corner_entries(self):
        """Yield (positions, cell_index, bx, by, dbx, dby) per in-bounds corner."""
        for cx, cy, bx, by, dbx, dby in self.corners:
            valid = (cx >= 0) & (cx < self.w) & (cy >= 0) & (cy < self.h)
            pos = np.flatnonzero(valid)
            yield pos, (cy[pos] * self.w + cx[pos]), bx[pos], by[pos], dbx, dby


def _shapes_or_raise(features_data, flows_data, rels_data):
    _, h, w = flows_data[0].shape
    for name, seq, lead in (("flow", flows_data, 2), ("rel", rels_data, 1)):
        for i, a in enumerate(seq):
            if a.shape != (lead, h, w):
                raise ValueError(f"{name}[{i}] shape {a.shape}, expected {(lead, h, w)}")
    if features_data is not None:
        c = features_data[0].shape[0]
        for i, a in enumerate(features_data):
            if a.shape != (c, h, w):
                raise ValueError(f"features[{i}] shape {a.shape}, expected {(c, h, w)}")
    return h, w


def softmax_splat(features, flows, rels, cfg: SplatConfig = SplatConfig()) -> Tensor:
    """Forward-warp features from all frames into one target grid.

    out(p) = sum_{i,q} b(u) e^{a z_i(q)} F_i(q) / (sum_{i,q} b(u) e^{a z_i(q)} + eps)
    with u = p - (q + flow_i(q)). Differentiable w.r.t. features, flows,
    and reliabilities; cells nobody lands in produce zero.
    """
    _check_lists(features, flows, rels)
    feat_data, feat_t = zip(*map(_unwrap, features))
    flow_data, flow_t = zip(*map(_unwrap, flows))
    rel_data, rel_t = zip(*map(_unwrap, rels))
    h, w = _shapes_or_raise(feat_data, flow_data, rel_data)
    c = feat_data[0].shape[0]
    hw = h * w

    geoms = [_FrameGeometry(f, z, cfg) for f, z in zip(flow_data, rel_data)]
    num = np.zeros(hw * c, dtype=np.float64)
    den = np.zeros(hw, dtype=np.float64)
    ch = np.arange(c, dtype=np.int64)
    for geom, feat in zip(geoms, feat_data):
        f_hwc = np.moveaxis(feat, 0, -1).reshape(hw, c)
        for pos, cell, bx, by, _, _ in geom.corner_entries():
            wt = bx * by * geom.weight[pos]
            den += np.bincount(cell, weights=wt, minlength=hw)
            idx2 = (cell[:, None] * c + ch[None, :]).ravel()
            num += np.bincount(idx2, weights=(wt[:, None] * f_hwc[pos]).ravel(), minlength=hw * c)
    num = num.reshape(hw, c).astype(np.float32)
    den = den.astype(np.float32)
    inv = 1.0 / (den + np.float32(cfg.eps_denominator))
    out_hwc = num * inv[:, None]
    out = np.moveaxis(out_hwc.reshape(h, w, c), -1, 0).copy()

    def grad_parts(g: np.ndarray):
        g_hwc = np.moveaxis(g, 0, -1).reshape(hw, c)
        gnum = g_hwc * inv[:, None]
        gden = -(gnum * out_hwc).sum(axis=1)
        return gnum, gden

    inputs = []
    for i in range(len(geoms)):
        geom, feat = geoms[i], feat_data[i]
        f_hwc = np.moveaxis(feat, 0, -1).reshape(hw, c)

        if feat_t[i] is not None:

            def vjp_feat(g, geom=geom):
                gnum, _ = grad_parts(g)
                df = np.zeros((hw, c), dtype=np.float32)
                for pos, cell, bx, by, _, _ in geom.corner_entries():
                    df[pos] += (bx * by * geom.weight[pos])[:, None] * gnum[cell]
                return np.moveaxis(df.reshape(h, w, c), -1, 0)

            inputs.append((feat_t[i], vjp_feat))

        if flow_t[i] is not None:

            def vjp_flow(g, geom=geom, f_hwc=f_hwc):
                gnum, gden = grad_parts(g)
                dtx = np.zeros(hw, dtype=np.float32)
                dty = np.zeros(hw, dtype=np.float32)
                for pos, cell, bx, by, dbx, dby in geom.corner_entries():
                    s = (f_hwc[pos] * gnum[cell]).sum(axis=1) + gden[cell]
                    sw = s * geom.weight[pos]
                    dtx[pos] += sw * dbx * by
                    dty[pos] += sw * bx * dby
                return np.stack([dtx.reshape(h, w), dty.reshape(h, w)])

            inputs.append((flow_t[i], vjp_flow))

        if rel_t[i] is not None:

            def vjp_rel(g, geom=geom, f_hwc=f_hwc):
                gnum, gden = grad_parts(g)
                dw = np.zeros(hw, dtype=np.float32)
                for pos, cell, bx, by, _, _ in geom.corner_entries():
                    s = (f_hwc[pos] * gnum[cell]).sum(axis=1) + gden[cell]
                    dw[pos] += bx * by * s
                dz = np.float32(cfg.alpha) * geom.weight * geom.clamp_open * dw
                return dz.reshape(1, h, w)

            inputs.append((rel_t[i], vjp_rel))

    return make_op(out, inputs)


def splat_mass(flows, rels, cfg: SplatConfig = SplatConfig()) -> Tensor:
    """Sum of unnormalized landing weights per target cell (the shared
    denominator before epsilon). Constant path, no gradients."""
    _check_lists(None, flows, rels)
    flow_data = [_unwrap(f)[0] for f in flows]
    rel_data = [_unwrap(z)[0] for z in rels]
    h, w = _shapes_or_raise(None, flow_data, rel_data)
    den = np.zeros(h * w, dtype=np.float64)
    for f, z in zip(flow_data, rel_data):
        geom = _FrameGeometry(f, z, cfg)
        for pos, cell, bx, by, _, _ in geom.corner_entries():
            den += np.bincount(cell, weights=bx * by * geom.weight[pos], minlength=h * w)
    return Tensor(den.reshape(1, h, w).astype(np.float32))


def quality_map(flows, rels, cfg: SplatConfig = SplatConfig()) -> Tensor:
    """Largest unnormalized contributor weight per cell; 0 where empty.

    The max subgradient routes to the argmax contributor; exact ties go to
    the lowest frame index, then row-major source pixel.
    """
    _check_lists(None, flows, rels)
    flow_data, flow_t = zip(*map(_unwrap, flows))
    rel_data, rel_t = zip(*map(_unwrap, rels))
    h, w = _shapes_or_raise(None, flow_data, rel_data)
    hw = h * w

    geoms = [_FrameGeometry(f, z, cfg) for f, z in zip(flow_data, rel_data)]
    best = np.zeros(hw, dtype=np.float32)
    entries = []  # per (frame, corner): contribution values in canonical order
    for i, geom in enumerate(geoms):
        for k, (pos, cell, bx, by, dbx, dby) in enumerate(geom.corner_entries()):
            val = (bx * by * geom.weight[pos]).astype(np.float32)
            live = val > 0.0
            np.maximum.at(best, cell[live], val[live])
            serial = (np.int64(i) * hw + pos) * 4 + k
            entries.append((i, pos, cell, val, live, serial, bx, by, dbx, dby))

    winner = np.full(hw, _SERIAL_EMPTY, dtype=np.int64)
    for _, pos, cell, val, live, serial, *_ in entries:
        hit = live & (val == best[cell])
        np.minimum.at(winner, cell[hit], serial[hit])

    inputs = []
    for i, geom in enumerate(geoms):
        frame_entries = [e for e in entries if e[0] == i]

        if flow_t[i] is not None:

            def vjp_flow(g, geom=geom, frame_entries=frame_entries):
                gq = g.reshape(hw)
                dtx = np.zeros(hw, dtype=np.float32)
                dty = np.zeros(hw, dtype=np.float32)
                for _, pos, cell, val, live, serial, bx, by, dbx, dby in frame_entries:
                    sel = live & (serial == winner[cell])
                    wgt = geom.weight[pos[sel]] * gq[cell[sel]]
                    dtx[pos[sel]] += wgt * dbx * by[sel]
                    dty[pos[sel]] += wgt * bx[sel] * dby
                return np.stack([dtx.reshape(h, w), dty.reshape(h, w)])

            inputs.append((flow_t[i], vjp_flow))

        if rel_t[i] is not None:

            def vjp_rel(g, geom=geom, frame_entries=frame_entries, cfg=cfg):
                gq = g.reshape(hw)
                dz = np.zeros(hw, dtype=np.float32)
                for _, pos, cell, val, live, serial, *_ in frame_entries:
                    sel = live & (serial == winner[cell])
                    dz[pos[sel]] += val[sel] * gq[cell[sel]]
                dz *= np.float32(cfg.alpha) * geom.clamp_open
                return dz.reshape(1, h, w)

            inputs.append((rel_t[i], vjp_rel))

    return make_op(best.reshape(1, h, w), inputs)
