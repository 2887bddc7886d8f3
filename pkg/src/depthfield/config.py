"""Pipeline configuration and the plain-text config-file format.

Config files hold ``key = value`` lines; ``#`` starts a comment. Flags given
on the command line override file values, which override the defaults
below. Values of 0 for the voxel sizes and tau mean "derive from the scene
diagonal at run time".
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .field import StageConfig, TrainConfig

__all__ = ["PipelineConfig", "parse_config_text", "format_config"]


@dataclass
class PipelineConfig:
    """All pipeline knobs; training defaults follow the published method."""

    global_steps: int = 5000
    global_t0: int = 1000
    global_lr: float = 1e-3
    view_steps: int = 500
    view_t0: int = 250
    view_lr: float = 1e-3
    batch_size: int = 512
    weight_decay: float = 1e-2
    neighbors: int = 4
    threshold_px: float = 1.0
    downsample_voxel: float = 0.0
    tsdf_voxel: float = 0.0
    tsdf_truncation_voxels: float = 4.0
    head: str = "vggt"
    tau: float = 0.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.head not in ("vggt", "mono", "average"):
            raise ValueError(f"head must be vggt, mono, or average, got {self.head!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            global_stage=StageConfig(self.global_steps, self.global_t0, self.global_lr),
            per_view=StageConfig(self.view_steps, self.view_t0, self.view_lr),
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines (with # comments) into a string dict."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(cls, name: str, raw: str):
    for f in fields(cls):
        if f.name == name:
            if f.type in ("int", int):
                return int(raw)
            if f.type in ("float", float):
                return float(raw)
            return raw
    raise KeyError(name)


def apply_values(cls, base, values: dict[str, str]):
    """Override dataclass fields from a parsed string dict."""
    known = {f.name for f in fields(cls)}
    kwargs = {f.name: getattr(base, f.name) for f in fields(cls)}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(cls, key, raw)
    return cls(**kwargs)


def format_config(config) -> str:
    """Serialize a dataclass config back to the key = value format."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    return "\n".join(lines) + "\n"
