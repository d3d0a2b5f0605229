"""Experiment configuration: strict JSON parsing with invariant checks.

Unknown keys are fatal to prevent silent ablation mistakes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .model import ModelConfig
from .objectives import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    iou_set: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    recall_grid: list[float] = field(
        default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(11)])
    k_list: list[int] = field(default_factory=lambda: [1, 5, 10])
    crop_count: int = 5
    average_number: int = 100

    def __post_init__(self):
        if self.crop_count < 1:
            raise ConfigError("crop_count must be >= 1")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=16))
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def canonical_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


_BLOCKS = {
    "model": ModelConfig,
    "data": SyntheticSpec,
    "train": TrainConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
}


def _build_block(cls, payload: dict, block: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"block {block!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in block {block!r}")
    try:
        return cls(**payload)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid value in block {block!r}: {exc}") from exc


def parse_config(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("top-level config must be an object")
    unknown = set(payload) - (set(_BLOCKS) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    for block, cls in _BLOCKS.items():
        if block in payload:
            kwargs[block] = _build_block(cls, payload[block], block)
    seed = payload.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(seed=seed, **kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(payload)
