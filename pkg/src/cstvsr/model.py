"""End-to-end synthesis pipeline.

Two low-res reference frames go through a frame encoder, continuous-scale
feature upsampling, motion encoding into latent grids, dense space-time
motion/reliability rendering, reliability-aware splatting (or backward
warping in the ablation variant), and a per-pixel decoder that emits RGB
at any target time and scale.
"""

from dataclasses import dataclass

import numpy as np

from .inf import (
    DEFAULT_OMEGA,
    FeatureUpsampler,
    Linear,
    MotionField,
    MotionLatent,
    gather_rows,
    latent_grid_geometry,
)
from .motion import ReliabilityMap, assemble_reliability, backward_warp
from .scene import FlowField, output_extent
from .splat import SplatConfig, quality_map, softmax_splat
from .tensor import Tensor, concat, conv2d

DECODER_WIDTHS = (128, 128, 128)


@dataclass(frozen=True)
class PipelineConfig:
    """Variant switches and sizes for the synthesis pipeline.

    The ablation toggles: use_Ft gates the temporally aggregated feature,
    use_ZL gates reliability input to the motion encoder, use_ZtH gates the
    aggregation-quality map as a decoder input. explicit_motion=False drops
    the motion encoder and conditions the space-time field on the frame
    features themselves.
    """

    variant: str = "forward"  # "forward" | "backward"
    explicit_motion: bool = True
    use_Ft: bool = True
    use_ZL: bool = True
    use_ZtH: bool = True
    n_refs: int = 2
    channels: int = 16
    scale_range: tuple = (1.0, 4.0)
    f01_upsample: str = "implicit"  # "implicit" | "nearest"
    symmetric_encoder: bool = True
    local_ensemble: bool = False

    def __post_init__(self):
        if self.variant not in ("forward", "backward"):
            raise ValueError(f"variant must be forward or backward, got {self.variant!r}")
        if self.n_refs < 2:
            raise ValueError(f"n_refs must be >= 2, got {self.n_refs}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        lo, hi = self.scale_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"scale_range must satisfy 1 <= lo <= hi, got {self.scale_range}")
        if self.f01_upsample not in ("implicit", "nearest"):
            raise ValueError(f"f01_upsample must be implicit or nearest, got {self.f01_upsample!r}")
        if self.use_ZtH and not self.use_Ft:
            raise ValueError("use_ZtH requires use_Ft: the quality map describes the aggregated feature")
        if self.variant == "backward" and not self.use_Ft:
            raise ValueError("backward variant is defined by its warped-feature path; use_Ft must be on")


@dataclass
class FrameFeatures:
    """Reference-frame latents plus a rough target-frame estimate."""

    f0: Tensor  # [C,H,W]
    f1: Tensor
    f01: Tensor


@dataclass
class SynthesisResult:
    image: Tensor  # [3,H',W']
    motion0: Tensor  # [2,H',W'], target-pixel units, reference 0
    motion1: Tensor
    rel0: Tensor  # [1,H',W']
    rel1: Tensor
    quality: Tensor | None  # aggregation quality map, when computed


class Conv:
    """3x3 same-padding convolution with bias."""

    def __init__(self, in_c, out_c, rng, k=3):
        bound = np.sqrt(6.0 / (in_c * k * k))
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), np.float32), requires_grad=True)
        self.pad = k // 2

    def __call__(self, x):
        return conv2d(x, self.weight, pad=self.pad) + self.bias

    def params(self, prefix):
        return [(f"{prefix}.w", self.weight), (f"{prefix}.b", self.bias)]


class FrameEncoder:
    """Residual conv net over the concatenated pair, three output heads.

    With weight sharing on, the reference head runs on both input orders so
    swapping the frames swaps the first two outputs, and the mid head is
    averaged over both orders.
    """

    def __init__(self, channels, rng, symmetric=True):
        self.symmetric = symmetric
        c = channels
        self.stem = Conv(6, c, rng)
        self.blocks = [(Conv(c, c, rng), Conv(c, c, rng)) for _ in range(2)]
        self.fuse = Conv(c, c, rng)
        if symmetric:
            self.heads = {"ref": Conv(c, c, rng), "mid": Conv(c, c, rng)}
        else:
            self.heads = {"f0": Conv(c, c, rng), "f1": Conv(c, c, rng), "mid": Conv(c, c, rng)}

    def _trunk(self, pair):
        h = self.stem(pair).relu()
        for first, second in self.blocks:
            h = h + second(first(h).relu())
        return self.fuse(h).relu()

    def __call__(self, frame0: Tensor, frame1: Tensor) -> FrameFeatures:
        if frame0.data.shape != frame1.data.shape:
            raise ValueError(
                f"frame shapes differ: {frame0.data.shape} vs {frame1.data.shape}"
            )
        _, h, w = frame0.data.shape
        x01 = concat([frame0, frame1], axis=0).reshape(1, 6, h, w)
        if not self.symmetric:
            trunk = self._trunk(x01)
            return FrameFeatures(
                *(self.heads[k](trunk).reshape(-1, h, w) for k in ("f0", "f1", "mid"))
            )
        x10 = concat([frame1, frame0], axis=0).reshape(1, 6, h, w)
        h01, h10 = self._trunk(x01), self._trunk(x10)
        mid = (self.heads["mid"](h01) + self.heads["mid"](h10)) * 0.5
        return FrameFeatures(
            self.heads["ref"](h01).reshape(-1, h, w),
            self.heads["ref"](h10).reshape(-1, h, w),
            mid.reshape(-1, h, w),
        )

    def params(self, prefix="frame_enc"):
        out = self.stem.params(f"{prefix}.stem")
        for i, (first, second) in enumerate(self.blocks):
            out += first.params(f"{prefix}.b{i}a") + second.params(f"{prefix}.b{i}b")
        out += self.fuse.params(f"{prefix}.fuse")
        for k in sorted(self.heads):
            out += self.heads[k].params(f"{prefix}.{k}")
        return out


class MotionEncoder:
    """Encodes one flow map and its reliability channels into a motion latent."""

    def __init__(self, channels, rng):
        c = channels
        self.stem = Conv(5, c, rng)
        self.res = (Conv(c, c, rng), Conv(c, c, rng))
        self.out = Conv(c, c, rng)

    def __call__(self, flow: FlowField, rel: ReliabilityMap, use_rel=True) -> MotionLatent:
        fh, fw = flow.data.shape[1:]
        if rel.raw.data.shape[1:] != (fh, fw):
            raise ValueError(
                f"flow {flow.data.shape} and reliability {rel.raw.data.shape} are misaligned"
            )
        z = rel.raw if use_rel else Tensor(np.zeros_like(rel.raw.data))
        x = concat([Tensor(flow.data.astype(np.float32)), z], axis=0).reshape(1, 5, fh, fw)
        h = self.stem(x).relu()
        h = h + self.res[1](self.res[0](h).relu())
        return MotionLatent(self.out(h).reshape(-1, fh, fw), ref_time=float(flow.src_time))

    def params(self, prefix="motion_enc"):
        return (
            self.stem.params(f"{prefix}.stem")
            + self.res[0].params(f"{prefix}.ra")
            + self.res[1].params(f"{prefix}.rb")
            + self.out.params(f"{prefix}.out")
        )


class PixelDecoder:
    """Per-pixel MLP over assembled feature columns."""

    def __init__(self, in_dim, rng):
        self.layers = []
        fan = in_dim
        for width in DECODER_WIDTHS:
            self.layers.append(Linear(fan, width, np.sqrt(6.0 / fan), rng))
            fan = width
        self.head = Linear(fan, 3, np.sqrt(6.0 / fan), rng)

    def __call__(self, rows: Tensor) -> Tensor:
        h = rows
        for layer in self.layers:
            h = layer(h).relu()
        return self.head(h)

    def params(self, prefix="decoder"):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.params(f"{prefix}.l{i}")
        return out + self.head.params(f"{prefix}.head")


def _nearest_upsample(feat: Tensor, scale: float) -> Tensor:
    c, h, w = feat.data.shape
    out_h, out_w = output_extent(h, scale), output_extent(w, scale)
    flat_idx, _, _ = latent_grid_geometry(h, w, out_h, out_w)
    return gather_rows(feat, flat_idx).transpose(1, 0).reshape(c, out_h, out_w)


def _as_rows(grid: Tensor) -> Tensor:
    c = grid.data.shape[0]
    return grid.reshape(c, -1).transpose(1, 0)


class Pipeline:
    """Builds every submodule from one seed and synthesizes frames."""

    def __init__(self, cfg: PipelineConfig, seed: int = 0):
        if cfg.n_refs != 2:
            raise ValueError("this build supports exactly two reference frames")
        self.cfg = cfg
        self.splat_cfg = SplatConfig()
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.frame_encoder = FrameEncoder(c, rng, symmetric=cfg.symmetric_encoder)
        self.motion_encoder = MotionEncoder(c, rng) if cfg.explicit_motion else None
        self.upsampler = FeatureUpsampler(
            c, rng, omega0=DEFAULT_OMEGA, local_ensemble=cfg.local_ensemble
        )
        self.motion_field = MotionField(c, rng)
        self.decoder = PixelDecoder(self._decoder_in_dim(), rng)

    def _decoder_in_dim(self):
        c = self.cfg.channels
        if self.cfg.variant == "backward":
            return 3 * c + 3  # two warped features, two rel maps, f01, t
        if not self.cfg.use_Ft:
            return c + 1  # f01, t
        return 2 * c + 1 + (1 if self.cfg.use_ZtH else 0)

    def params(self):
        out = self.frame_encoder.params("frame_enc")
        if self.motion_encoder is not None:
            out += self.motion_encoder.params("motion_enc")
        out += self.upsampler.params("upsampler")
        out += self.motion_field.params("motion_field")
        out += self.decoder.params("decoder")
        return out

    def load_params(self, arrays: dict):
        own = dict(self.params())
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:4]}...")
        for name, tens in own.items():
            if arrays[name].shape != tens.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arrays[name].shape} vs {tens.data.shape}"
                )
            tens.data = arrays[name].astype(np.float32)

    def _f01_high(self, f01: Tensor, scale: float) -> Tensor:
        if self.cfg.f01_upsample == "nearest":
            return _nearest_upsample(f01, scale)
        return self.upsampler(f01, scale)

    def _motion_latents(self, feats, frames, flows):
        if not self.cfg.explicit_motion:
            return MotionLatent(feats.f0, 0.0), MotionLatent(feats.f1, 1.0)
        flow01, flow10 = flows
        frame0, frame1 = frames
        rel0 = assemble_reliability(frame0, frame1, flow01, flow10)
        rel1 = assemble_reliability(frame1, frame0, flow10, flow01)
        enc = self.motion_encoder
        return (
            enc(flow01, rel0, use_rel=self.cfg.use_ZL),
            enc(flow10, rel1, use_rel=self.cfg.use_ZL),
        )

    def synthesize(
        self,
        frame0,
        frame1,
        t: float,
        scale: float,
        flows=None,
        teacher_motion=None,
        clamp: bool = False,
    ) -> SynthesisResult:
        """Rendering core: frames [3,H,W] at times 0 and 1 to a frame at t.

        flows: (flow 0->1, flow 1->0) in low-res pixel units; required with
        explicit motion. teacher_motion: optional pair of [2,H',W'] grids in
        target-pixel units substituted for the predicted motion in the
        feature aggregation path only (the returned motions stay predicted,
        so their supervision is unaffected). clamp clips RGB to [0,1] and
        detaches; evaluation only.
        """
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0,1], got {t}")
        if scale < 1.0:
            raise ValueError(f"scale must be >= 1, got {scale}")
        frame0 = frame0 if isinstance(frame0, Tensor) else Tensor(np.asarray(frame0, np.float32))
        frame1 = frame1 if isinstance(frame1, Tensor) else Tensor(np.asarray(frame1, np.float32))
        if self.cfg.explicit_motion and flows is None:
            raise ValueError("explicit-motion pipeline needs (flow 0->1, flow 1->0)")

        feats = self.frame_encoder(frame0, frame1)
        f0_high = self.upsampler(feats.f0, scale)
        f1_high = self.upsampler(feats.f1, scale)
        f01_high = self._f01_high(feats.f01, scale)
        latent0, latent1 = self._motion_latents(feats, (frame0, frame1), flows)
        motion0, rel0 = self.motion_field.grid(latent0, scale, t)
        motion1, rel1 = self.motion_field.grid(latent1, scale, t)

        if teacher_motion is not None:
            warp0, warp1 = (
                m if isinstance(m, Tensor) else Tensor(np.asarray(m, np.float32))
                for m in teacher_motion
            )
        else:
            warp0, warp1 = motion0, motion1

        out_h, out_w = motion0.data.shape[1:]
        columns = []
        quality = None
        if self.cfg.variant == "backward":
            columns += [
                _as_rows(backward_warp(f0_high, warp0)),
                _as_rows(backward_warp(f1_high, warp1)),
                _as_rows(rel0),
                _as_rows(rel1),
            ]
        elif self.cfg.use_Ft:
            feat_t = softmax_splat(
                [f0_high, f1_high], [warp0, warp1], [rel0, rel1], self.splat_cfg
            )
            columns.append(_as_rows(feat_t))
            if self.cfg.use_ZtH:
                quality = quality_map([warp0, warp1], [rel0, rel1], self.splat_cfg)
                columns.append(_as_rows(quality))
        columns.append(_as_rows(f01_high))
        columns.append(Tensor(np.full((out_h * out_w, 1), t, np.float32)))
        rows = concat(columns, axis=1)
        image = self.decoder(rows).transpose(1, 0).reshape(3, out_h, out_w)
        if clamp:
            image = Tensor(np.clip(image.data, 0.0, 1.0))
        return SynthesisResult(image, motion0, motion1, rel0, rel1, quality)


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM export of a [3,H,W] float image in [0,1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    h, w = image.shape[1:]
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm; returns float32 [3,H,W] in [0,1]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError("not a binary PPM file")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(h * w * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval
