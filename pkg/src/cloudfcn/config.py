"""Pipeline configuration file (TOML).

Relative paths are resolved against the directory holding the config file.
Example::

    seed = 0

    [paths]
    scenes = "scenes"    # <scenes>/<scene_id>/{B2,B3,B4,B5,QA}.csr
    output = "out"
    truth = "truth"      # <truth>/<scene_id>.pgm, used by evaluate

    [scenes]
    train = ["s0", "s1"] # default: every scene directory
    test = ["s2"]

    [qa]
    cloud_bits = [[4, 1]]
    snow_bits = [[10, 1]]

    [gt]
    band = "B2"
    threshold = "auto"   # or a number
    percentile = 95.0
    fallback_threshold = 0.5

    [network]
    input_size = 192
    base_channels = 32
    channel_cap = 1024

    [patch]
    native = 384
    threshold = 0.5

    [train]
    epochs = 600
    batch_size = 4
    lr = 1e-4
    gt_source = "corrected"
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .raster_io import Band, QaBitConfig
from .training import TrainConfig
from .unet import NetworkConfig


@dataclass(frozen=True)
class GtConfig:
    band: Band = Band.B2
    threshold: float | str = "auto"
    percentile: float = 95.0
    fallback_threshold: float | None = None

    def __post_init__(self):
        if isinstance(self.band, str):
            try:
                object.__setattr__(self, "band", Band[self.band])
            except KeyError:
                raise ConfigError(f"unknown band {self.band!r}") from None
        if self.threshold != "auto":
            if isinstance(self.threshold, bool) or not isinstance(self.threshold, (int, float)):
                raise ConfigError("gt.threshold must be 'auto' or a number")
            if self.threshold < 0:
                raise ConfigError("gt.threshold must be non-negative")
        if not 0 <= self.percentile <= 100:
            raise ConfigError("gt.percentile must lie in [0, 100]")
        if self.fallback_threshold is not None and self.fallback_threshold < 0:
            raise ConfigError("gt.fallback_threshold must be non-negative")


@dataclass(frozen=True)
class PatchConfig:
    native: int = 384
    threshold: float = 0.5

    def __post_init__(self):
        if self.native <= 0:
            raise ConfigError("patch.native must be positive")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("patch.threshold must lie in [0, 1]")


@dataclass
class PipelineConfig:
    base_dir: Path
    scenes_dir: Path | None = None
    output_dir: Path | None = None
    truth_dir: Path | None = None
    train_scenes: list[str] | None = None
    test_scenes: list[str] | None = None
    qa: QaBitConfig = field(default_factory=lambda: QaBitConfig(((4, 1),), ((10, 1),)))
    gt: GtConfig = field(default_factory=GtConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gt_source: str = "corrected"
    seed: int = 0

    def scene_ids(self, which: str | None = None) -> list[str]:
        chosen = {"train": self.train_scenes, "test": self.test_scenes}.get(which or "")
        if chosen is not None:
            return list(chosen)
        if self.scenes_dir is None or not self.scenes_dir.is_dir():
            return []
        return sorted(p.name for p in self.scenes_dir.iterdir() if p.is_dir())

    def with_overrides(self, seed: int | None = None, threshold: float | None = None, command: str = ""):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if threshold is not None:
            if command == "correct-gt":
                cfg = replace(cfg, gt=GtConfig(cfg.gt.band, threshold, cfg.gt.percentile, cfg.gt.fallback_threshold))
            else:
                cfg = replace(cfg, patch=PatchConfig(cfg.patch.native, threshold))
        return cfg

    def require_paths(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise ConfigError(f"paths.{name.removesuffix('_dir')} is required for this command")
            if name != "output_dir" and not p.exists():
                raise ConfigError(f"{name.removesuffix('_dir')} path {p} does not exist")


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _build(cls, values: dict, section: str, exclude=()):
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, path.parent)


def parse_config(raw: dict, base_dir: Path) -> PipelineConfig:
    top_known = {"seed", "paths", "scenes", "qa", "gt", "network", "patch", "train"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    paths = _section(raw, "paths")
    bad = set(paths) - {"scenes", "output", "truth"}
    if bad:
        raise ConfigError(f"unknown keys in [paths]: {', '.join(sorted(bad))}")

    def resolve(key):
        return (base_dir / paths[key]).resolve() if key in paths else None

    scenes = _section(raw, "scenes")
    qa = _section(raw, "qa")
    try:
        qa_cfg = QaBitConfig(
            tuple(tuple(p) for p in qa.get("cloud_bits", [[4, 1]])),
            tuple(tuple(p) for p in qa.get("snow_bits", [[10, 1]])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[qa]: {exc}") from exc

    train_raw = dict(_section(raw, "train"))
    gt_source = train_raw.pop("gt_source", "corrected")
    if gt_source not in ("corrected", "default"):
        raise ConfigError("train.gt_source must be 'corrected' or 'default'")
    train_raw.setdefault("seed", seed)

    return PipelineConfig(
        base_dir=base_dir,
        scenes_dir=resolve("scenes"),
        output_dir=resolve("output"),
        truth_dir=resolve("truth"),
        train_scenes=scenes.get("train"),
        test_scenes=scenes.get("test"),
        qa=qa_cfg,
        gt=_build(GtConfig, _section(raw, "gt"), "gt"),
        network=_build(NetworkConfig, _section(raw, "network"), "network"),
        patch=_build(PatchConfig, _section(raw, "patch"), "patch"),
        train=_build(TrainConfig, train_raw, "train"),
        gt_source=gt_source,
        seed=seed,
    )
