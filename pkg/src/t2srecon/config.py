"""Pipeline configuration: one JSON file, strict keys, CLI overrides.

Defaults mirror the acquisition and processing protocol: TEs [46, 120, 194]
ms, low-resolution 3.125 x 3.125 x 3 mm dynamics, second echo (index 1) for
structure, MP-PCA denoising on, reconstruction at 1.2 mm with control-point
schedule [12, 5] and final delta 0.015.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .grid import PsfSpec
from .svr import ReconConfig


@dataclass
class SimulateSettings:
    """Scene and acquisition settings for the synthetic dataset command."""

    ga_weeks: float = 28.0
    dims: tuple = (64, 64, 48)
    spacing_mm: tuple = (3.125, 3.125, 3.0)
    n_dynamics: int = 20
    max_rot_deg: float = 5.0
    max_trans_mm: float = 5.0
    entries: list | None = None
    jitter_deg: float = 0.0
    jitter_mm: float = 0.0
    noise_sigma: float = 10.0
    noise_model: str = "gaussian"
    slice_order: str = "sequential"
    feather_mm: float = 2.0
    organ_geometry_seed: int = 0
    deform_amplitude_mm: float = 0.0
    deform_wavelength_mm: float = 60.0

    def __post_init__(self):
        if self.n_dynamics < 1:
            raise ConfigError("n_dynamics must be >= 1")
        if len(tuple(self.dims)) != 3 or len(tuple(self.spacing_mm)) != 3:
            raise ConfigError("dims and spacing_mm must be triples")
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)


@dataclass
class DenoiseSettings:
    enabled: bool = True
    patch_radius: int = 2

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ConfigError("patch_radius must be >= 1")


@dataclass
class QcSettings:
    ncc_threshold: float = 0.5
    consistency_threshold: float = 0.4
    keep: tuple = ()
    drop: tuple = ()

    def __post_init__(self):
        self.keep = tuple(int(i) for i in self.keep)
        self.drop = tuple(int(i) for i in self.drop)


@dataclass
class StatsSettings:
    case_id: str = "case"
    ga_weeks: float | None = None
    t2star_cap_ms: float = 2000.0


@dataclass
class PipelineConfig:
    """Everything the pipeline commands need, loadable from one JSON file."""

    input_dir: str | None = None
    out_dir: str | None = None
    labels_path: str | None = None
    tes_ms: tuple = (46.0, 120.0, 194.0)
    echo_index: int = 1
    seed: int = 0
    threads: int = 1
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    denoise: DenoiseSettings = field(default_factory=DenoiseSettings)
    qc: QcSettings = field(default_factory=QcSettings)
    recon: ReconConfig = field(default_factory=ReconConfig)
    stats: StatsSettings = field(default_factory=StatsSettings)

    def __post_init__(self):
        self.tes_ms = tuple(float(t) for t in self.tes_ms)
        if len(self.tes_ms) < 2:
            raise ConfigError("tes_ms needs at least two echo times")
        if not (0 <= self.echo_index < len(self.tes_ms)):
            raise ConfigError(
                f"echo_index {self.echo_index} out of range for {len(self.tes_ms)} echoes"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def require_input(self) -> Path:
        if not self.input_dir:
            raise ConfigError("no input series directory configured (input_dir)")
        p = Path(self.input_dir)
        if not p.is_dir():
            raise ConfigError(f"input series directory does not exist: {p}")
        return p

    def require_out(self) -> Path:
        if not self.out_dir:
            raise ConfigError("no output directory configured (out_dir)")
        p = Path(self.out_dir)
        p.mkdir(parents=True, exist_ok=True)
        return p


_SECTION_TYPES = {
    "simulate": SimulateSettings,
    "denoise": DenoiseSettings,
    "qc": QcSettings,
    "recon": ReconConfig,
    "stats": StatsSettings,
}


def _build(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES and cls is PipelineConfig:
            kwargs[key] = _build(_SECTION_TYPES[key], value, f"{context}.{key}")
        elif cls is ReconConfig and key == "psf":
            kwargs[key] = _build(PsfSpec, value, f"{context}.psf")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(config: PipelineConfig) -> dict:
    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: clean(getattr(value, f.name))
                    for f in fields(value)}
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        if isinstance(value, list):
            return [clean(v) for v in value]
        return value

    return clean(config)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
    )
