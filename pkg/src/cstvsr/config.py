"""Plain-text run configuration and per-run manifests.

Config files are INI-style: bracketed sections holding ``key = value``
lines. ``[train]`` maps onto :class:`TrainConfig` and ``[pipeline]`` onto
:class:`PipelineConfig`; omitted keys keep the dataclass defaults, unknown
keys or sections are rejected so typos fail loudly instead of silently
training the wrong thing.
"""

import configparser
import subprocess
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

from .model import PipelineConfig
from .train import TrainConfig

_SECTIONS = {"train": TrainConfig, "pipeline": PipelineConfig}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"{key}: expected a boolean, got {raw!r}")


def _parse_value(raw: str, default, key: str):
    """Coerce by the type of the field's default value."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):  # before int: bool is an int subclass
            return _parse_bool(raw, key)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = tuple(float(p) for p in raw.split(","))
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated numbers")
            return parts
    except ValueError as exc:
        raise ValueError(f"{key}: {exc}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def _section_kwargs(parser: configparser.ConfigParser, section: str, cls) -> dict:
    if not parser.has_section(section):
        return {}
    known = {f.name: f.default for f in fields(cls)}
    kwargs = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        kwargs[key] = _parse_value(raw, known[key], f"[{section}] {key}")
    return kwargs


def parse_config(text: str) -> tuple[TrainConfig, PipelineConfig]:
    """Parse INI text into validated (TrainConfig, PipelineConfig)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys like use_Ft are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None
    if parser.defaults():
        raise ValueError("keys before the first [section] are not allowed")
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise ValueError(f"unknown config sections: {unknown}")
    tcfg = TrainConfig(**_section_kwargs(parser, "train", TrainConfig))
    pcfg = PipelineConfig(**_section_kwargs(parser, "pipeline", PipelineConfig))
    return tcfg, pcfg


def load_config(path) -> tuple[TrainConfig, PipelineConfig]:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(tcfg: TrainConfig, pcfg: PipelineConfig) -> str:
    """Full snapshot, defaults included, in a form load_config round-trips."""
    lines = []
    for section, cfg in (("train", tcfg), ("pipeline", pcfg)):
        lines.append(f"[{section}]")
        for f in fields(cfg):
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def pipeline_from_manifest(manifest: dict) -> PipelineConfig:
    """Rebuild a PipelineConfig from a checkpoint manifest's stringified fields."""
    kwargs = {}
    for f in fields(PipelineConfig):
        if f.name not in manifest:
            continue  # older checkpoints may lack newer toggles; keep default
        raw = manifest[f.name]
        if isinstance(f.default, bool):
            kwargs[f.name] = raw.strip() in ("True", "true", "1")
        else:
            kwargs[f.name] = _parse_value(raw, f.default, f.name)
    return PipelineConfig(**kwargs)


# -- run manifests ------------------------------------------------------------

MANIFEST_NAME = "run_manifest.txt"
_CONFIG_MARKER = "--- config ---"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    """Working-tree version of the package source, or "unknown"."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except OSError:
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


@dataclass
class RunManifest:
    """Provenance record written exactly once per run directory."""

    command: str
    seed: int
    config_text: str
    git: str = field(default_factory=git_describe)
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)

    def to_text(self) -> str:
        head = [
            f"command={self.command}",
            f"seed={self.seed}",
            f"git={self.git}",
            f"started={self.started}",
            f"finished={self.finished}",
            f"outputs={','.join(str(p) for p in self.outputs)}",
            _CONFIG_MARKER,
        ]
        return "\n".join(head) + "\n" + self.config_text

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(self.to_text())
        return path


def read_manifest(run_dir) -> RunManifest:
    text = Path(run_dir, MANIFEST_NAME).read_text()
    head, _, config_text = text.partition(_CONFIG_MARKER + "\n")
    values = {}
    for line in head.splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            values[key] = val
    return RunManifest(
        command=values.get("command", ""),
        seed=int(values.get("seed", 0)),
        config_text=config_text,
        git=values.get("git", "unknown"),
        started=values.get("started", ""),
        finished=values.get("finished", ""),
        outputs=[p for p in values.get("outputs", "").split(",") if p],
    )
