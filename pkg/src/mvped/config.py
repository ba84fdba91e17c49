"""Single-file run configuration covering every pipeline stage."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .optimize import FitConfig
from .renderer import RenderConfig
from .sis import SisConfig
from .synth import SynthConfig
from .volume import DEFAULT_MAX_VOXELS


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    voxel_size: float = 0.25
    z_min: float = 0.0
    z_max: float = 2.0
    max_voxels: int = DEFAULT_MAX_VOXELS


@dataclass
class DetectConfig:
    score_thr: float = 0.3
    nms_radius: float = 0.5
    match_radius: float = 0.5


@dataclass
class PipelineConfig:
    mask_source: str = "sis"  # "sis" or "ideal" (synthetic ground-truth masks)

    def __post_init__(self):
        if self.mask_source not in ("sis", "ideal"):
            raise ValueError(f"mask_source must be 'sis' or 'ideal', got {self.mask_source!r}")


SECTIONS = {
    "synth": SynthConfig,
    "sis": SisConfig,
    "grid": GridConfig,
    "render": RenderConfig,
    "fit": FitConfig,
    "detect": DetectConfig,
    "pipeline": PipelineConfig,
}
# the top-level seed is the only seed; sections inherit it
SEEDED = ("synth", "sis", "fit")


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    sis: SisConfig = field(default_factory=SisConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> "RunConfig":
        self.seed = int(seed)
        for name in SEEDED:
            setattr(self, name, dataclasses.replace(getattr(self, name), seed=self.seed))
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            sec = doc.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section '{name}' must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)} - {"seed"}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            try:
                kwargs[name] = klass(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid '{name}' section: {exc}") from exc
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        return cls(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            sec.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
