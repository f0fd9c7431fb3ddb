"""Synthetic scenes with analytic frames, dense flow, and occlusion masks.

A scene is a textured background plus rigid objects (rectangles, discs)
following polynomial trajectories of degree <= 3 over t in [0,1], with
optional rotation. Textures are band-limited sums of sinusoids evaluated
in closed form, so a scene can be rendered at any spatial scale and any
time without resampling artifacts, and the dense forward/backward flow
between any two instants is exact.

Conventions: world coordinates are measured in base-canvas pixels, x along
width, y along height. A frame rendered at scale ``s`` has extents
``round(s*H) x round(s*W)`` with pixel centers at ``(j + 0.5) / s_axis``
world units, where ``s_axis`` is the realized per-axis scale after
rounding. Flow fields carry displacements in their own pixel units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import write_stif

SUPERSAMPLE = 2  # 2x2 analytic subsamples per output pixel


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def output_extent(extent: int, scale: float) -> int:
    return round_half_up(extent * scale)


@dataclass
class ObjectSpec:
    """One rigid scene object. Trajectory coefficients map t to the center."""

    shape: str  # "rect" | "disc"
    half_size: tuple[float, float]  # rect: half extents; disc: (radius, radius)
    texture_seed: int
    z_order: int
    traj_x: tuple[float, ...]  # polynomial coefficients, low order first
    traj_y: tuple[float, ...]
    rotation_rate: float = 0.0  # radians per unit time

    def center(self, t: float) -> tuple[float, float]:
        return (_polyval(self.traj_x, t), _polyval(self.traj_y, t))

    def angle(self, t: float) -> float:
        return self.rotation_rate * t


@dataclass
class SceneSpec:
    height: int
    width: int
    background_seed: int
    objects: list[ObjectSpec] = field(default_factory=list)

    def __post_init__(self):
        zs = [o.z_order for o in self.objects]
        if len(set(zs)) != len(zs):
            raise ValueError(f"z-order values must be unique, got {zs}")

    def to_json(self) -> str:
        payload = {
            "height": self.height,
            "width": self.width,
            "background_seed": self.background_seed,
            "objects": [
                {
                    "shape": o.shape,
                    "half_size": list(o.half_size),
                    "texture_seed": o.texture_seed,
                    "z_order": o.z_order,
                    "traj_x": list(o.traj_x),
                    "traj_y": list(o.traj_y),
                    "rotation_rate": o.rotation_rate,
                }
                for o in self.objects
            ],
        }
        return json.dumps(payload, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        raw = json.loads(text)
        objects = [
            ObjectSpec(
                shape=o["shape"],
                half_size=tuple(o["half_size"]),
                texture_seed=o["texture_seed"],
                z_order=o["z_order"],
                traj_x=tuple(o["traj_x"]),
                traj_y=tuple(o["traj_y"]),
                rotation_rate=o.get("rotation_rate", 0.0),
            )
            for o in raw["objects"]
        ]
        return SceneSpec(raw["height"], raw["width"], raw["background_seed"], objects)


@dataclass
class FlowField:
    """Dense per-pixel displacement map in its own pixel units."""

    data: np.ndarray  # [2, H, W] float32, channels (dx, dy)
    src_time: float
    dst_time: float
    direction: str  # "forward" | "backward"


@dataclass
class OcclusionMask:
    data: np.ndarray  # [1, H, W] float32 in {0, 1}; 1 = source invisible at dst


def _polyval(coefs, t):
    acc = 0.0
    for c in reversed(coefs):
        acc = acc * t + c
    return acc


class _Texture:
    """Band-limited procedural color: per channel a sum of <= 8 sinusoids."""

    def __init__(self, seed: int, base_range=(0.3, 0.7), amplitude=0.28, max_freq=0.08):
        rng = np.random.default_rng(seed)
        self.base = rng.uniform(*base_range, size=3).astype(np.float32)
        k = 8
        angles = rng.uniform(0, 2 * np.pi, size=(3, k))
        freqs = rng.uniform(0.015, max_freq, size=(3, k))
        self.fx = (freqs * np.cos(angles)).astype(np.float32)
        self.fy = (freqs * np.sin(angles)).astype(np.float32)
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, k)).astype(np.float32)
        amp = rng.uniform(0.5, 1.0, size=(3, k))
        amp *= amplitude / amp.sum(axis=1, keepdims=True)
        self.amp = amp.astype(np.float32)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate at world coords; x, y same shape; returns [3, *shape]."""
        out = np.empty((3,) + x.shape, dtype=np.float32)
        two_pi = np.float32(2 * np.pi)
        for c in range(3):
            acc = np.full(x.shape, self.base[c], dtype=np.float32)
            for k in range(self.amp.shape[1]):
                acc += self.amp[c, k] * np.sin(
                    two_pi * (self.fx[c, k] * x + self.fy[c, k] * y) + self.phase[c, k]
                )
            out[c] = acc
        return out


def _local_coords(obj: ObjectSpec, x, y, t):
    cx, cy = obj.center(t)
    theta = obj.angle(t)
    dx = x - cx
    dy = y - cy
    if theta == 0.0:
        return dx, dy
    c, s = np.cos(-theta), np.sin(-theta)
    return c * dx - s * dy, s * dx + c * dy


def _membership(obj: ObjectSpec, u, v):
    hx, hy = obj.half_size
    if obj.shape == "rect":
        return (np.abs(u) <= hx) & (np.abs(v) <= hy)
    if obj.shape == "disc":
        return (u / hx) ** 2 + (v / hy) ** 2 <= 1.0
    raise ValueError(f"unknown object shape {obj.shape!r}")


def _pixel_centers(extent: int, scale_axis: float) -> np.ndarray:
    return ((np.arange(extent, dtype=np.float32) + 0.5) / scale_axis).astype(np.float32)


def render(spec: SceneSpec, t: float, scale: float = 1.0) -> np.ndarray:
    """Render the scene at time t and spatial scale s >= 1 as [3, sH, sW].

    Deterministic in (spec, t, scale). Object edges are anti-aliased with
    2x2 analytic supersampling; textures are evaluated in closed form.
    """
    if scale < 1.0:
        raise ValueError(f"scale must be >= 1, got {scale}")
    out_h = output_extent(spec.height, scale)
    out_w = output_extent(spec.width, scale)
    sy = out_h / spec.height
    sx = out_w / spec.width
    ss = SUPERSAMPLE
    xs = _pixel_centers(out_w * ss, sx * ss)
    ys = _pixel_centers(out_h * ss, sy * ss)
    x = np.broadcast_to(xs[None, :], (out_h * ss, out_w * ss))
    y = np.broadcast_to(ys[:, None], (out_h * ss, out_w * ss))

    color = _Texture(spec.background_seed).sample(x, y)
    for obj in sorted(spec.objects, key=lambda o: o.z_order):
        u, v = _local_coords(obj, x, y, t)
        mask = _membership(obj, u, v)
        if not mask.any():
            continue
        tex = _Texture(obj.texture_seed).sample(u, v)
        color = np.where(mask[None], tex, color)

    color = color.reshape(3, out_h, ss, out_w, ss).mean(axis=(2, 4))
    return np.clip(color, 0.0, 1.0).astype(np.float32)


def _top_object_index(spec: SceneSpec, x, y, t):
    """Index into spec.objects of the topmost cover per point, -1 = background."""
    top = np.full(x.shape, -1, dtype=np.int32)
    top_z = np.full(x.shape, -(2**31) + 1, dtype=np.int64)
    for i, obj in enumerate(spec.objects):
        u, v = _local_coords(obj, x, y, t)
        mask = _membership(obj, u, v) & (obj.z_order > top_z)
        top[mask] = i
        top_z[mask] = obj.z_order
    return top


def displacement_at(spec: SceneSpec, x, y, t0: float, t1: float):
    """Exact displacement (world units) of the material at (x, y, t0) to t1.

    Returns (dx, dy, top) where top indexes the carrying object (-1 for the
    static background, displacement zero).
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    top = _top_object_index(spec, x, y, t0)
    dx = np.zeros(x.shape, dtype=np.float32)
    dy = np.zeros(y.shape, dtype=np.float32)
    if t0 == t1:
        return dx, dy, top
    for i, obj in enumerate(spec.objects):
        sel = top == i
        if not sel.any():
            continue
        u, v = _local_coords(obj, x[sel], y[sel], t0)
        c1x, c1y = obj.center(t1)
        theta1 = obj.angle(t1)
        c, s = np.cos(theta1), np.sin(theta1)
        land_x = c1x + c * u - s * v
        land_y = c1y + s * u + c * v
        dx[sel] = land_x - x[sel]
        dy[sel] = land_y - y[sel]
    return dx, dy, top


def occlusion_at(spec: SceneSpec, x, y, t0: float, t1: float):
    """True where the material at (x, y, t0) is invisible at t1.

    A point is occluded when its landing location is covered by an object
    with higher z-order (background counts as covered by any object), or
    lands outside the canvas.
    """
    dx, dy, top = displacement_at(spec, x, y, t0, t1)
    land_x = np.asarray(x, dtype=np.float32) + dx
    land_y = np.asarray(y, dtype=np.float32) + dy
    src_z = np.full(top.shape, -(2**31) + 1, dtype=np.int64)
    for i, obj in enumerate(spec.objects):
        src_z[top == i] = obj.z_order
    occluded = np.zeros(top.shape, dtype=bool)
    for obj in spec.objects:
        u, v = _local_coords(obj, land_x, land_y, t1)
        occluded |= _membership(obj, u, v) & (obj.z_order > src_z)
    occluded |= (land_x < 0) | (land_x > spec.width) | (land_y < 0) | (land_y > spec.height)
    return occluded


def ground_truth_flow(
    spec: SceneSpec, t0: float, t1: float, scale: float = 1.0
) -> tuple[FlowField, OcclusionMask]:
    """Dense analytic flow from frame(t0) to frame(t1) at the given scale.

    Displacements are expressed in output pixels. Each pixel follows the
    topmost object covering its center at t0; background pixels get zero
    flow. Returned with the matching occlusion mask.
    """
    out_h = output_extent(spec.height, scale)
    out_w = output_extent(spec.width, scale)
    sy = out_h / spec.height
    sx = out_w / spec.width
    xs = _pixel_centers(out_w, sx)
    ys = _pixel_centers(out_h, sy)
    x = np.broadcast_to(xs[None, :], (out_h, out_w))
    y = np.broadcast_to(ys[:, None], (out_h, out_w))
    dx, dy, _ = displacement_at(spec, x, y, t0, t1)
    flow = np.stack([dx * sx, dy * sy]).astype(np.float32)
    occ = occlusion_at(spec, x, y, t0, t1)
    direction = "forward" if t1 >= t0 else "backward"
    return (
        FlowField(flow, src_time=t0, dst_time=t1, direction=direction),
        OcclusionMask(occ[None].astype(np.float32)),
    )


# -- downsampling ----------------------------------------------------------


def box_downsample(frame: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor blocks; extents must divide evenly."""
    c, h, w = frame.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by {factor}")
    return (
        frame.reshape(c, h // factor, factor, w // factor, factor)
        .mean(axis=(2, 4))
        .astype(np.float32)
    )


def _catmull_rom_weights(frac: np.ndarray) -> np.ndarray:
    t = frac
    t2, t3 = t * t, t * t * t
    w0 = -0.5 * t3 + t2 - 0.5 * t
    w1 = 1.5 * t3 - 2.5 * t2 + 1.0
    w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w3 = 0.5 * t3 - 0.5 * t2
    return np.stack([w0, w1, w2, w3])


def bicubic_downsample(frame: np.ndarray, factor: int) -> np.ndarray:
    """4-tap Catmull-Rom resampling to 1/factor of the input extents."""
    c, h, w = frame.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by {factor}")

    def resample_axis(arr, n_out, axis):
        n_in = arr.shape[axis]
        centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        base = np.floor(centers).astype(int)
        frac = (centers - base).astype(np.float32)
        weights = _catmull_rom_weights(frac)  # [4, n_out]
        idx = np.clip(base[None, :] + np.arange(-1, 3)[:, None], 0, n_in - 1)
        moved = np.moveaxis(arr, axis, 0)
        out = np.einsum("kn,kn...->n...", weights, moved[idx])
        return np.moveaxis(out, 0, axis)

    out = resample_axis(frame.astype(np.float32), h // factor, 1)
    out = resample_axis(out, w // factor, 2)
    return out.astype(np.float32)


# -- random scenes ----------------------------------------------------------


def random_scene(
    seed: int,
    height: int = 32,
    width: int = 32,
    n_objects: int = 2,
    max_speed: float = 8.0,
    curved: bool = True,
    rotation: bool = False,
) -> SceneSpec:
    """Seeded random scene whose object centers stay inside the canvas."""
    rng = np.random.default_rng(seed)
    margin = 4.0
    objects = []
    for i in range(n_objects):
        half = tuple(rng.uniform(3.0, max(4.0, min(height, width) / 5)) for _ in range(2))
        start = (
            rng.uniform(margin + half[0], width - margin - half[0]),
            rng.uniform(margin + half[1], height - margin - half[1]),
        )
        for _ in range(64):
            speed = rng.uniform(0.3, 1.0, size=2) * max_speed * rng.choice([-1.0, 1.0], 2)
            if curved:
                quad = rng.uniform(-0.3, 0.3, size=2) * max_speed
                cube = rng.uniform(-0.1, 0.1, size=2) * max_speed
            else:
                quad = cube = np.zeros(2)
            tx = (start[0], float(speed[0]), float(quad[0]), float(cube[0]))
            ty = (start[1], float(speed[1]), float(quad[1]), float(cube[1]))
            ts = np.linspace(0.0, 1.0, 33)
            cx = np.array([_polyval(tx, t) for t in ts])
            cy = np.array([_polyval(ty, t) for t in ts])
            if (
                (cx > margin).all()
                and (cx < width - margin).all()
                and (cy > margin).all()
                and (cy < height - margin).all()
            ):
                break
        else:
            tx, ty = (start[0],), (start[1],)
        objects.append(
            ObjectSpec(
                shape="rect" if rng.uniform() < 0.5 else "disc",
                half_size=half,
                texture_seed=int(rng.integers(1 << 30)),
                z_order=i,
                traj_x=tx,
                traj_y=ty,
                rotation_rate=float(rng.uniform(-1.5, 1.5)) if rotation else 0.0,
            )
        )
    return SceneSpec(height, width, int(rng.integers(1 << 30)), objects)


def crossing_scene(seed: int, height: int = 32, width: int = 32) -> SceneSpec:
    """Two objects whose straight trajectories cross mid-sequence.

    The lower object passes behind the upper one, so a band of pixels is
    occluded around the crossing instant. Used for reliability and for the
    temporal smoothness comparison of forward vs backward motion.
    """
    rng = np.random.default_rng(seed)
    cy = height / 2 + rng.uniform(-2, 2)
    span = width * 0.45
    size = rng.uniform(4.0, 6.0)
    jitter = rng.uniform(-1.5, 1.5)
    front = ObjectSpec(
        shape="disc",
        half_size=(size, size),
        texture_seed=seed * 7 + 1,
        z_order=1,
        traj_x=(width / 2 - span / 2, span),
        traj_y=(cy + jitter, -2 * jitter),
    )
    back = ObjectSpec(
        shape="rect",
        half_size=(size, size * 1.2),
        texture_seed=seed * 7 + 2,
        z_order=0,
        traj_x=(width / 2 + span / 2, -span),
        traj_y=(cy - jitter, 2 * jitter),
    )
    return SceneSpec(height, width, seed * 7 + 3, [front, back])


# -- dataset emission --------------------------------------------------------


def make_dataset(
    specs: list[SceneSpec],
    frames_per_clip: int,
    out_dir,
    scale: int = 4,
    downsample: str = "box",
) -> list[Path]:
    """Write clips of rendered frames, flows, and masks in STIF format.

    Layout per clip: ``lr_0.stif, lr_1.stif`` (endpoint frames downsampled
    by ``scale``), ``hr_%02d.stif`` (all frames at the high-res scale),
    ``flow_fwd_%02d.stif`` ([4,H,W]: displacement from each endpoint to
    that frame, in high-res pixels), ``occ_%02d.stif`` ([2,H,W] matching
    masks), and ``meta.txt``.
    """
    if frames_per_clip < 3:
        raise ValueError(f"frames_per_clip must be >= 3, got {frames_per_clip}")
    if downsample not in ("box", "bicubic"):
        raise ValueError(f"downsample must be box or bicubic, got {downsample!r}")
    down = box_downsample if downsample == "box" else bicubic_downsample
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = np.linspace(0.0, 1.0, frames_per_clip)
    clip_dirs = []
    for ci, spec in enumerate(specs):
        clip = out_dir / f"clip_{ci:04d}"
        clip.mkdir(exist_ok=True)
        frames = [render(spec, float(t), scale) for t in times]
        write_stif(clip / "lr_0.stif", down(frames[0], scale))
        write_stif(clip / "lr_1.stif", down(frames[-1], scale))
        for k, t in enumerate(times):
            write_stif(clip / f"hr_{k:02d}.stif", frames[k])
            flow0, occ0 = ground_truth_flow(spec, 0.0, float(t), scale)
            flow1, occ1 = ground_truth_flow(spec, 1.0, float(t), scale)
            write_stif(
                clip / f"flow_fwd_{k:02d}.stif",
                np.concatenate([flow0.data, flow1.data], axis=0),
            )
            write_stif(clip / f"occ_{k:02d}.stif", np.concatenate([occ0.data, occ1.data]))
        meta = [
            f"times={','.join(f'{t:.8f}' for t in times)}",
            f"scale={scale}",
            f"frames={frames_per_clip}",
            f"downsample={downsample}",
            f"scene={spec.to_json()}",
        ]
        (clip / "meta.txt").write_text("\n".join(meta) + "\n")
        clip_dirs.append(clip)
    return clip_dirs


def read_meta(clip_dir) -> dict:
    meta = {}
    for line in Path(clip_dir, "meta.txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    return meta
