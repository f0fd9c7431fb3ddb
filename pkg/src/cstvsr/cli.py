"""Command-line entry point.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``infer`` (one frame at
a chosen time and scale), ``eval`` (metric grid over a dataset), ``analyze``
(temporal motion spectra), ``ablate`` (train and compare pipeline variants).

Exit codes: 0 success, 2 configuration or usage error, 3 missing or corrupt
data, 4 numeric failure (training diverged). Every failure prints a single
diagnostic line to stderr.
"""

import argparse
import csv
import dataclasses
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunManifest,
    dump_config,
    load_config,
    pipeline_from_manifest,
    utc_now,
)
from .inf import load_checkpoint
from .model import Pipeline, write_ppm
from .scene import (
    FlowField,
    SceneSpec,
    box_downsample,
    crossing_scene,
    ground_truth_flow,
    make_dataset,
    random_scene,
    read_meta,
    render,
)
from .spectral import REPRESENTATIONS, extract_motion_signal, high_freq_ratio, temporal_fft
from .tensor import read_stif, write_stif
from .train import (
    TrainingDiverged,
    bilinear_resize,
    make_training_sample,
    psnr_y,
    ssim_y,
    train,
    training_scenes,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# ablation presets; the letters follow the component ladder: bare shared
# feature, plus aggregated feature, plus reliability into the motion
# latents, plus the aggregation-quality map
PRESETS = {
    "a": dict(use_Ft=False, use_ZtH=False, use_ZL=False),
    "b": dict(use_Ft=True, use_ZtH=False, use_ZL=False),
    "c": dict(use_Ft=True, use_ZtH=False, use_ZL=True),
    "d": dict(use_Ft=True, use_ZtH=True, use_ZL=True),
    "backward": dict(variant="backward"),
    "implicit": dict(explicit_motion=False),
}


class DataError(RuntimeError):
    """Missing or unreadable run inputs; maps to exit code 3."""


# -- shared loading helpers ----------------------------------------------------


def _read_stif_checked(path) -> np.ndarray:
    path = Path(path)
    try:
        return read_stif(path)
    except FileNotFoundError:
        raise DataError(f"missing tensor file: {path}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _load_pipeline(ckpt_dir, f01_upsample=None) -> tuple[Pipeline, dict]:
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "manifest.txt").is_file():
        raise DataError(f"not a checkpoint directory (no manifest.txt): {ckpt_dir}")
    try:
        params, manifest = load_checkpoint(ckpt_dir)
        pcfg = pipeline_from_manifest(manifest)
        if f01_upsample is not None:
            pcfg = dataclasses.replace(pcfg, f01_upsample=f01_upsample)
        pipe = Pipeline(pcfg, seed=int(manifest.get("seed", "0")))
        pipe.load_params(params)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {ckpt_dir}: {exc}") from None
    return pipe, manifest


def _clip_scene(meta: dict, where) -> SceneSpec:
    if "scene" not in meta:
        raise DataError(f"{where}: meta.txt has no scene record")
    try:
        return SceneSpec.from_json(meta["scene"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{where}: malformed scene record: {exc}") from None


def _clip_meta(clip_dir) -> dict:
    try:
        return read_meta(clip_dir)
    except FileNotFoundError:
        raise DataError(f"not a clip directory (no meta.txt): {clip_dir}") from None


def _clip_flows(clip_dir, meta) -> tuple[FlowField, FlowField]:
    """Endpoint-to-endpoint flows in low-res pixel units.

    The scene record gives them exactly; without one, fall back to the
    stored high-res endpoint flow fields, box-reduced and rescaled.
    """
    if "scene" in meta:
        spec = _clip_scene(meta, clip_dir)
        return (
            ground_truth_flow(spec, 0.0, 1.0, 1.0)[0],
            ground_truth_flow(spec, 1.0, 0.0, 1.0)[0],
        )
    try:
        frames = int(meta["frames"])
        scale = int(meta["scale"])
    except (KeyError, ValueError):
        raise DataError(f"{clip_dir}: meta.txt lacks frames/scale fields") from None
    last = _read_stif_checked(Path(clip_dir) / f"flow_fwd_{frames - 1:02d}.stif")
    first = _read_stif_checked(Path(clip_dir) / "flow_fwd_00.stif")
    f01 = box_downsample(np.ascontiguousarray(last[0:2]), scale) / scale
    f10 = box_downsample(np.ascontiguousarray(first[2:4]), scale) / scale
    return (
        FlowField(f01, src_time=0.0, dst_time=1.0, direction="forward"),
        FlowField(f10, src_time=1.0, dst_time=0.0, direction="backward"),
    )


def _sample_flows(sample) -> tuple[FlowField, FlowField]:
    return (
        FlowField(sample.flow01, src_time=0.0, dst_time=1.0, direction="forward"),
        FlowField(sample.flow10, src_time=1.0, dst_time=0.0, direction="backward"),
    )


def _parse_float_list(raw: str, what: str) -> list[float]:
    try:
        values = [float(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise ValueError(f"{what}: expected comma-separated numbers, got {raw!r}") from None
    if not values:
        raise ValueError(f"{what}: empty list")
    return values


# -- gen -----------------------------------------------------------------------


def _gen_specs(args) -> list[SceneSpec]:
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2**31 - 1, size=args.clips)
    specs = []
    for i, s in enumerate(seeds):
        crossing = args.kind == "crossing" or (args.kind == "mixed" and i % 2 == 1)
        if crossing:
            specs.append(crossing_scene(int(s), args.height, args.width))
        else:
            specs.append(
                random_scene(
                    int(s),
                    args.height,
                    args.width,
                    n_objects=2,
                    max_speed=min(args.height, args.width) / 4.0,
                )
            )
    return specs


def cmd_gen(args) -> int:
    started = utc_now()
    out = Path(args.out)
    clips = make_dataset(
        _gen_specs(args), args.frames, out, scale=args.scale, downsample=args.downsample
    )
    snapshot = "\n".join(
        f"{k} = {getattr(args, k)}"
        for k in ("clips", "frames", "height", "width", "scale", "downsample", "kind", "seed")
    )
    RunManifest(
        command="gen",
        seed=args.seed,
        config_text=snapshot + "\n",
        started=started,
        finished=utc_now(),
        outputs=[c.name for c in clips],
    ).write(out)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    started = utc_now()
    tcfg, pcfg = load_config(args.config)
    out = Path(args.out)
    final = train(tcfg, pcfg, out)
    RunManifest(
        command="train",
        seed=tcfg.seed,
        config_text=dump_config(tcfg, pcfg),
        started=started,
        finished=utc_now(),
        outputs=[final.name, "train_log.csv"],
    ).write(out)
    print(f"final checkpoint: {final}")
    return EXIT_OK


# -- infer ---------------------------------------------------------------------


def cmd_infer(args) -> int:
    out = Path(args.out)
    if out.suffix not in (".stif", ".ppm"):
        raise ValueError(f"--out must end in .stif or .ppm, got {out.name!r}")
    pipe, _ = _load_pipeline(args.checkpoint, args.f01_upsample)
    clip = Path(args.clip)
    meta = _clip_meta(clip)
    lr0 = _read_stif_checked(clip / "lr_0.stif")
    lr1 = _read_stif_checked(clip / "lr_1.stif")
    flows = _clip_flows(clip, meta)
    res = pipe.synthesize(lr0, lr1, args.t, args.scale, flows=flows, clamp=True)
    image = res.image.data
    if out.suffix == ".ppm":
        write_ppm(out, image)
    else:
        write_stif(out, image)
    print(f"wrote {out} shape [3,{image.shape[1]},{image.shape[2]}]")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

# worker state lives at module level so a forked pool can reuse one loaded
# pipeline per process instead of pickling it per cell
_EVAL_STATE: dict = {}


def _eval_init(ckpt_dir, clip_payload, teacher_motion):
    pipe, _ = _load_pipeline(ckpt_dir)
    _EVAL_STATE["pipe"] = pipe
    _EVAL_STATE["clips"] = [
        (lr0, lr1, SceneSpec.from_json(scene_json)) for lr0, lr1, scene_json in clip_payload
    ]
    _EVAL_STATE["teacher"] = teacher_motion


def _eval_cell(cell: tuple[float, float]) -> tuple:
    t, s = cell
    pipe = _EVAL_STATE["pipe"]
    psnrs, ssims, base = [], [], []
    for lr0, lr1, spec in _EVAL_STATE["clips"]:
        target = render(spec, t, s)
        flows = (
            ground_truth_flow(spec, 0.0, 1.0, 1.0)[0],
            ground_truth_flow(spec, 1.0, 0.0, 1.0)[0],
        )
        teacher = None
        if _EVAL_STATE["teacher"]:
            teacher = (
                ground_truth_flow(spec, 0.0, t, s)[0].data,
                ground_truth_flow(spec, 1.0, t, s)[0].data,
            )
        res = pipe.synthesize(lr0, lr1, t, s, flows=flows, teacher_motion=teacher, clamp=True)
        out_h, out_w = target.shape[1:]
        psnrs.append(psnr_y(res.image.data, target))
        if min(out_h, out_w) >= 11:
            ssims.append(ssim_y(res.image.data, target))
        nearest = lr0 if t <= 0.5 else lr1
        base.append(psnr_y(bilinear_resize(nearest, out_h, out_w), target))
    ssim_txt = f"{np.mean(ssims):.6f}" if ssims else ""
    return (t, s, f"{np.mean(psnrs):.4f}", ssim_txt, f"{np.mean(base):.4f}", len(psnrs))


def cmd_eval(args) -> int:
    t_list = _parse_float_list(args.t_list, "--t-list")
    s_list = _parse_float_list(args.s_list, "--s-list")
    if args.workers < 1:
        raise ValueError(f"--workers must be >= 1, got {args.workers}")
    dataset = Path(args.dataset)
    clip_dirs = sorted(dataset.glob("clip_*"))
    if not clip_dirs:
        raise DataError(f"no clip_* directories under {dataset}")
    if args.max_clips:
        clip_dirs = clip_dirs[: args.max_clips]
    payload = []
    for clip in clip_dirs:
        meta = _clip_meta(clip)
        if "scene" not in meta:
            raise DataError(f"{clip}: continuous evaluation needs the meta scene record")
        payload.append(
            (
                _read_stif_checked(clip / "lr_0.stif"),
                _read_stif_checked(clip / "lr_1.stif"),
                meta["scene"],
            )
        )
    _load_pipeline(args.checkpoint)  # fail fast before forking workers

    cells = [(t, s) for t in t_list for s in s_list]
    init_args = (args.checkpoint, payload, args.teacher_motion)
    if args.workers == 1:
        _eval_init(*init_args)
        rows = [_eval_cell(c) for c in cells]
    else:
        with multiprocessing.Pool(args.workers, _eval_init, init_args) as pool:
            rows = pool.map(_eval_cell, cells)

    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "s", "psnr_y", "ssim_y", "baseline_psnr_y", "n_clips"])
        writer.writerows(rows)
    for t, s, p, ss, b, _ in rows:
        print(f"t={t:g} s={s:g} psnr_y={p} ssim_y={ss or 'n/a'} baseline={b}")
    print(f"wrote {out} ({len(rows)} cells x {len(clip_dirs)} clips)")
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------


def _load_scene_file(path) -> SceneSpec:
    path = Path(path)
    if path.is_dir():
        path = path / "meta.txt"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"scene file not found: {path}") from None
    for line in text.splitlines():
        if line.startswith("scene="):
            text = line.split("=", 1)[1]
            break
    try:
        return SceneSpec.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a scene record: {exc}") from None


def _parse_pixels(raw: str) -> list[tuple[int, int]]:
    pixels = []
    for chunk in raw.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ValueError(f"--pixels: expected x,y pairs separated by ';', got {chunk!r}")
        try:
            pixels.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ValueError(f"--pixels: non-integer coordinate in {chunk!r}") from None
    return pixels


def cmd_analyze(args) -> int:
    spec = _load_scene_file(args.scene)
    pixels = _parse_pixels(args.pixels)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pixel", "representation", "bin", "magnitude_x", "magnitude_y"])
        for x, y in pixels:
            for rep in REPRESENTATIONS:
                signal = extract_motion_signal(spec, (x, y), rep, args.T)
                spectrum = temporal_fft(signal, args.window)
                ratio = high_freq_ratio(spectrum)
                print(f"pixel {x},{y} {rep}: high_freq_ratio={ratio:.6f}")
                for k in range(spectrum.shape[0]):
                    writer.writerow(
                        [f"{x},{y}", rep, k, repr(float(spectrum[k, 0])), repr(float(spectrum[k, 1]))]
                    )
    n_rows = len(pixels) * len(REPRESENTATIONS) * (args.T // 2 + 1)
    print(f"wrote {out} ({n_rows} rows)")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------


def _preset_scores(ckpt_dir, tcfg, t: float) -> tuple[float, str]:
    """Reload the trained variant and score it on the held-out scene pool."""
    pipe, _ = _load_pipeline(ckpt_dir)
    _, val_specs = training_scenes(tcfg)
    s = float(tcfg.scale_max)
    psnrs, ssims = [], []
    for spec in val_specs:
        sample = make_training_sample(spec, t, s)
        res = pipe.synthesize(
            sample.lr0, sample.lr1, t, s, flows=_sample_flows(sample), clamp=True
        )
        psnrs.append(psnr_y(res.image.data, sample.target))
        if min(sample.target.shape[1:]) >= 11:
            ssims.append(ssim_y(res.image.data, sample.target))
    ssim_txt = f"{np.mean(ssims):.6f}" if ssims else ""
    return float(np.mean(psnrs)), ssim_txt


def cmd_ablate(args) -> int:
    started = utc_now()
    names = [p.strip() for p in args.presets.split(",") if p.strip()]
    unknown = [p for p in names if p not in PRESETS]
    if unknown:
        raise ValueError(f"unknown presets {unknown}; choose from {sorted(PRESETS)}")
    if not names:
        raise ValueError("--presets: empty list")
    tcfg, pcfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name in names:
        variant = dataclasses.replace(pcfg, **PRESETS[name])
        final = train(tcfg, variant, out / f"preset_{name}")
        psnr, ssim = _preset_scores(final, tcfg, args.eval_t)
        rows.append([name, f"{psnr:.4f}", ssim, str(final.relative_to(out))])
        print(f"preset {name}: psnr_y={psnr:.4f}" + (f" ssim_y={ssim}" if ssim else ""))

    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "psnr_y", "ssim_y", "checkpoint"])
        writer.writerows(rows)
    RunManifest(
        command="ablate",
        seed=tcfg.seed,
        config_text=dump_config(tcfg, pcfg),
        started=started,
        finished=utc_now(),
        outputs=[table.name] + [r[3] for r in rows],
    ).write(out)
    print(f"wrote {table}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cstvsr",
        description="continuous space-time video super-resolution toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--downsample", choices=("box", "bicubic"), default="box")
    p.add_argument("--kind", choices=("random", "crossing", "mixed"), default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="synthesize one frame at (t, scale)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--out", required=True, help="output path ending in .stif or .ppm")
    p.add_argument("--f01-upsample", choices=("implicit", "nearest"), default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric grid over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--t-list", default="0,0.25,0.5,0.75,1")
    p.add_argument("--s-list", default="1,1.7,2,3.3,4,6")
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-motion", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-clips", type=int, default=0, help="0 means all clips")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="temporal spectra of motion representations")
    p.add_argument("--scene", required=True, help="scene json, meta.txt, or clip dir")
    p.add_argument("--pixels", required=True, help="x0,y0;x1,y1;...")
    p.add_argument("--T", type=int, default=33)
    p.add_argument("--window", choices=("rect", "hann"), default="rect")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train and compare pipeline variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--presets", default="a,b,c,d,backward,implicit")
    p.add_argument("--eval-t", type=float, default=0.5)
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(exc, code: int) -> int:
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_CONFIG
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        return _fail(exc, EXIT_NUMERIC)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_DATA)
    except ValueError as exc:
        return _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
