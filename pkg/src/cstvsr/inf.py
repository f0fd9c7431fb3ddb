"""Local implicit neural functions over latent grids.

A sinusoidal MLP decodes values for continuous query coordinates from the
nearest latent cell: spatially (feature upsampling to any scale) and in
space-time (forward motion plus reliability at any (x, y, t)).

Query batches of any size are evaluated in fixed blocks of QUERY_BLOCK
rows (tail padded). At a fixed GEMM height the BLAS result of a row
depends only on that row, so a single query reproduces its in-batch value
bitwise; variable heights would not (the N=1 path dispatches to a
different kernel).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import output_extent
from .tensor import Tensor, concat, make_op, matmul, read_stif, write_stif

QUERY_BLOCK = 1024
DEFAULT_OMEGA = 30.0
HIDDEN_WIDTHS = (64, 64, 256)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, scale: float, rng: np.random.Generator):
        self.weight = Tensor(
            rng.uniform(-scale, scale, size=(fan_in, fan_out)).astype(np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(
            rng.uniform(-scale, scale, size=(1, fan_out)).astype(np.float32),
            requires_grad=True,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def params(self, prefix: str):
        return [(f"{prefix}.w", self.weight), (f"{prefix}.b", self.bias)]


class Siren:
    """Three sine hidden layers (64, 64, 256 wide) and a linear head.

    First layer weights U(-1/fan_in, 1/fan_in) with the sine taking
    omega0 * (Wx + b); later layers U(-sqrt(6/fan_in)/omega0, +...).
    """

    def __init__(self, in_dim: int, out_dim: int, rng, omega0: float = DEFAULT_OMEGA):
        self.omega0 = float(omega0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        widths = HIDDEN_WIDTHS
        self.layers = [Linear(in_dim, widths[0], 1.0 / in_dim, rng)]
        fan = widths[0]
        for width in widths[1:] + (out_dim,):
            self.layers.append(Linear(fan, width, np.sqrt(6.0 / fan) / self.omega0, rng))
            fan = width

    def __call__(self, x: Tensor) -> Tensor:
        h = (self.layers[0](x) * self.omega0).sin()
        for layer in self.layers[1:-1]:
            h = layer(h).sin()
        return self.layers[-1](h)

    def params(self, prefix: str = "net"):
        out = []
        for i, layer in enumerate(self.layers):
            name = f"{prefix}.l{i}" if i < len(self.layers) - 1 else f"{prefix}.head"
            out.extend(layer.params(name))
        return out

    def query(self, x: Tensor) -> Tensor:
        """Evaluate in canonical QUERY_BLOCK-row blocks; any batch size."""
        n = x.data.shape[0]
        if n == 0:
            raise ValueError("empty query batch")
        pad = (-n) % QUERY_BLOCK
        if pad:
            x = concat([x, Tensor(np.zeros((pad, x.data.shape[1]), np.float32))], axis=0)
        chunks = [
            self(x[i : i + QUERY_BLOCK]) for i in range(0, n + pad, QUERY_BLOCK)
        ]
        out = chunks[0] if len(chunks) == 1 else concat(chunks, axis=0)
        return out[:n] if pad else out


def gather_rows(grid: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Pick rows [N, C] out of a [C, H, W] grid by flat cell index.

    Duplicate indices are the norm (many queries share a latent cell), so
    the adjoint scatter-adds.
    """
    c = grid.data.shape[0]
    flat = grid.data.reshape(c, -1)
    out = flat[:, flat_idx].T.copy()

    def vjp(g, shape=grid.data.shape):
        acc = np.zeros((shape[0], shape[1] * shape[2]), dtype=np.float32)
        np.add.at(acc.T, flat_idx, g)
        return acc.reshape(shape)

    return make_op(out, [(grid, vjp)])


def latent_grid_geometry(h: int, w: int, out_h: int, out_w: int):
    """Map output pixel centers into latent units; nearest cell + offset.

    Returns (flat_idx [N], offsets [N,2] in latent-cell units within
    [-0.5, 0.5], cell_size (x, y) in latent units). N = out_h*out_w,
    row-major.
    """
    sy = out_h / h
    sx = out_w / w
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) / sx
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) / sy
    ix = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    off_x = xs - (ix + 0.5)
    off_y = ys - (iy + 0.5)
    flat_idx = (iy[:, None] * w + ix[None, :]).ravel()
    offsets = np.stack(
        [
            np.broadcast_to(off_x[None, :], (out_h, out_w)).ravel(),
            np.broadcast_to(off_y[:, None], (out_h, out_w)).ravel(),
        ],
        axis=1,
    ).astype(np.float32)
    return flat_idx, offsets, (1.0 / sx, 1.0 / sy)


class FeatureUpsampler:
    """Continuous-scale feature super-resolution from a latent grid.

    Each output cell decodes from its nearest latent vector, the relative
    offset, and the output cell size. Optional 4-corner ensemble averages
    the predictions of the surrounding latent cells, area-weighted.
    """

    def __init__(self, channels: int, rng, omega0: float = DEFAULT_OMEGA,
                 local_ensemble: bool = False):
        self.channels = channels
        self.local_ensemble = local_ensemble
        self.net = Siren(channels + 4, channels, rng, omega0)

    def __call__(self, feat: Tensor, scale: float) -> Tensor:
        if scale < 1.0:
            raise ValueError(f"scale must be >= 1, got {scale}")
        feat = feat if isinstance(feat, Tensor) else Tensor(feat)
        c, h, w = feat.data.shape
        out_h, out_w = output_extent(h, scale), output_extent(w, scale)
        flat_idx, offsets, cell = latent_grid_geometry(h, w, out_h, out_w)
        n = out_h * out_w
        cell_cols = np.broadcast_to(
            np.asarray(cell, np.float32)[None, :], (n, 2)
        ).astype(np.float32)

        if not self.local_ensemble:
            inp = concat(
                [gather_rows(feat, flat_idx), Tensor(offsets), Tensor(cell_cols)], axis=1
            )
            out = self.net.query(inp)
            return out.transpose(1, 0).reshape(c, out_h, out_w)

        # 4-corner ensemble: decode from the four latent cells surrounding
        # the query and blend with bilinear (opposite-area) weights.
        iy, ix = np.divmod(flat_idx, w)
        px = ix + 0.5 + offsets[:, 0]
        py = iy + 0.5 + offsets[:, 1]
        x0 = np.floor(px - 0.5).astype(np.int64)
        y0 = np.floor(py - 0.5).astype(np.int64)
        acc = None
        total = np.zeros((n, 1), np.float32)
        for dy in (0, 1):
            for dx in (0, 1):
                cx = np.clip(x0 + dx, 0, w - 1)
                cy = np.clip(y0 + dy, 0, h - 1)
                off = np.stack([px - (cx + 0.5), py - (cy + 0.5)], axis=1).astype(np.float32)
                weight = (
                    np.maximum(0.0, 1.0 - np.abs(off[:, :1]))
                    * np.maximum(0.0, 1.0 - np.abs(off[:, 1:]))
                ).astype(np.float32)
                inp = concat(
                    [gather_rows(feat, cy * w + cx), Tensor(off), Tensor(cell_cols)], axis=1
                )
                pred = self.net.query(inp) * Tensor(weight)
                acc = pred if acc is None else acc + pred
                total += weight
        out = acc * Tensor(1.0 / np.maximum(total, np.float32(1e-8)))
        return out.transpose(1, 0).reshape(c, out_h, out_w)

    def params(self, prefix: str = "upsampler"):
        return self.net.params(prefix)


@dataclass
class MotionLatent:
    data: Tensor  # [C, H, W], aligned with the low-res grid
    ref_time: float


class MotionField:
    """Space-time implicit function: (latent, p - p_r, t - t_r) -> (motion, reliability).

    Motion comes out in low-res pixel units; grid rendering rescales per
    axis to the target resolution.
    """

    def __init__(self, channels: int, rng, omega0: float = DEFAULT_OMEGA):
        self.channels = channels
        self.net = Siren(channels + 3, 3, rng, omega0)

    def query(self, latent: MotionLatent, p: np.ndarray, t) -> tuple[Tensor, Tensor]:
        """Point queries: p [N,2] in latent units, t scalar or [N].

        Returns (motion [2,N] in low-res pixel units, reliability [1,N]).
        """
        p = np.asarray(p, dtype=np.float32)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] == 0:
            raise ValueError(f"queries must be [N,2] with N >= 1, got {p.shape}")
        _, h, w = latent.data.data.shape
        ix = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, w - 1)
        iy = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, h - 1)
        offsets = np.stack([p[:, 0] - (ix + 0.5), p[:, 1] - (iy + 0.5)], axis=1)
        dt = (np.broadcast_to(np.asarray(t, np.float32), (p.shape[0],)) - latent.ref_time)
        # sine layers assume unit-range inputs; latent channels are unbounded
        # conv features, so they enter at 1/omega0 effective weight while the
        # coordinate channels keep the full frequency multiplier
        inp = concat(
            [
                gather_rows(latent.data, iy * w + ix) * (1.0 / self.net.omega0),
                Tensor(offsets.astype(np.float32)),
                Tensor(dt.astype(np.float32)[:, None]),
            ],
            axis=1,
        )
        out = self.net.query(inp)  # [N, 3]
        motion = out[:, :2].transpose(1, 0)
        rel = out[:, 2:].transpose(1, 0)
        return motion, rel

    def grid(self, latent: MotionLatent, scale: float, t: float) -> tuple[Tensor, Tensor]:
        """Dense evaluation over the scaled grid.

        Returns (motion [2,H',W'] in target pixel units, reliability
        [1,H',W']).
        """
        _, h, w = latent.data.data.shape
        out_h, out_w = output_extent(h, scale), output_extent(w, scale)
        sy, sx = out_h / h, out_w / w
        xs = (np.arange(out_w, dtype=np.float32) + 0.5) / sx
        ys = (np.arange(out_h, dtype=np.float32) + 0.5) / sy
        p = np.stack(
            [
                np.broadcast_to(xs[None, :], (out_h, out_w)).ravel(),
                np.broadcast_to(ys[:, None], (out_h, out_w)).ravel(),
            ],
            axis=1,
        )
        motion, rel = self.query(latent, p, t)
        unit = Tensor(np.array([[sx], [sy]], np.float32))
        motion_h = (motion * unit).reshape(2, out_h, out_w)
        return motion_h, rel.reshape(1, out_h, out_w)

    def params(self, prefix: str = "motion_field"):
        return self.net.params(prefix)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: dict, manifest: dict) -> None:
    """Write one tensor file per named parameter plus a key=value manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value, np.float32)
        write_stif(path / f"{name}.stif", data)
    lines = [f"{k}={v}" for k, v in manifest.items()]
    lines.append(f"params={','.join(params.keys())}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    manifest = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            manifest[k] = v
    names = manifest.pop("params").split(",") if "params" in manifest else []
    params = {name: read_stif(path / f"{name}.stif") for name in names}
    return params, manifest
