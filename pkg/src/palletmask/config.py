"""JSON run configuration with strict key checking.

Top-level sections (all optional): ``scenario``, ``noise``, ``mask_train``,
``trainer``, ``iteration``. Unknown keys anywhere raise :class:`ConfigError`.
See ``docs/schemas.md`` for the field list.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from palletmask.core import BoxDims, PalletConfig
from palletmask.env import NoiseConfig, ScenarioConfig
from palletmask.learn import TrainConfig
from palletmask.rl import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class IterationSettings:
    iterations: int = 5
    states_per_iteration: int = 2000
    sampling_rate: float = 0.25
    eval_episodes: int = 20


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    mask_train: TrainConfig = field(default_factory=TrainConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    iteration: IterationSettings = field(default_factory=IterationSettings)


def _check_keys(section: str, data: Mapping, allowed) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


def _int(section: str, key: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    return value


def _box(value) -> BoxDims:
    if isinstance(value, Mapping):
        _check_keys("scenario.box_catalog[]", value, ("length", "width", "height", "weight"))
        dims = [value.get(k) for k in ("length", "width", "height")]
        weight = value.get("weight", 1.0)
    else:
        dims, weight = list(value), 1.0
        if len(dims) != 3:
            raise ConfigError(f"box {value!r}: expected [length, width, height]")
    dims = [_int("scenario.box_catalog", "dim", d) for d in dims]
    return BoxDims(*dims, weight=float(weight))


def _pallet(value) -> PalletConfig:
    if isinstance(value, Mapping):
        _check_keys("scenario.pallet", value, [f.name for f in fields(PalletConfig)])
        kw = dict(value)
    else:
        if len(value) != 3:
            raise ConfigError("scenario.pallet: expected [length, width, max_height]")
        kw = dict(zip(("length_cells", "width_cells", "max_height_cells"), value))
    for k in ("length_cells", "width_cells", "max_height_cells"):
        if k in kw:
            _int("scenario.pallet", k, kw[k])
    return PalletConfig(**kw)


def _simple(section: str, cls, data: Mapping):
    names = [f.name for f in fields(cls)]
    _check_keys(section, data, names)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def scenario_from_dict(data: Mapping) -> ScenarioConfig:
    _check_keys("scenario", data, [f.name for f in fields(ScenarioConfig)])
    kw: dict[str, Any] = dict(data)
    try:
        if "box_catalog" in kw:
            kw["box_catalog"] = tuple(_box(b) for b in kw["box_catalog"])
        if "pallet" in kw:
            kw["pallet"] = _pallet(kw["pallet"])
        for k in ("episode_box_count", "buffer_capacity", "rng_seed"):
            if k in kw:
                _int("scenario", k, kw[k])
        return ScenarioConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scenario: {exc}") from exc


def config_from_dict(data: Mapping) -> RunConfig:
    _check_keys("config", data, ("scenario", "noise", "mask_train", "trainer", "iteration"))
    cfg = RunConfig()
    if "scenario" in data:
        cfg.scenario = scenario_from_dict(data["scenario"])
    if "noise" in data:
        cfg.noise = _simple("noise", NoiseConfig, data["noise"])
    if "mask_train" in data:
        cfg.mask_train = _simple("mask_train", TrainConfig, data["mask_train"])
    if "trainer" in data:
        cfg.trainer = _simple("trainer", TrainerConfig, data["trainer"])
    if "iteration" in data:
        cfg.iteration = _simple("iteration", IterationSettings, data["iteration"])
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-JSON snapshot that ``config_from_dict`` reads back to an equal config."""
    sc = cfg.scenario
    scenario = {
        "box_catalog": [{"length": b.length, "width": b.width, "height": b.height, "weight": b.weight} for b in sc.box_catalog],
        "episode_box_count": sc.episode_box_count,
        "buffer_capacity": sc.buffer_capacity,
        "weight_range": list(sc.weight_range),
        "pallet": asdict(sc.pallet),
        "rng_seed": sc.rng_seed,
        "fixed_multiset": sc.fixed_multiset,
    }
    return {
        "scenario": scenario,
        "noise": asdict(cfg.noise),
        "mask_train": asdict(cfg.mask_train),
        "trainer": asdict(cfg.trainer),
        "iteration": asdict(cfg.iteration),
    }
