"""Model configuration and its JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from ..errors import ConfigurationError

TOGGLE_NAMES = ("cbom", "fdtim", "mffam_low", "mffam_high")
REFERENCE_SIDE = 1024
REFERENCE_K = 1000
MIN_K = 8


@dataclass(frozen=True)
class Toggles:
    cbom: bool = True
    fdtim: bool = True
    mffam_low: bool = True
    mffam_high: bool = True

    @classmethod
    def all_off(cls) -> "Toggles":
        return cls(False, False, False, False)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in TOGGLE_NAMES}

    def label(self) -> str:
        on = [n for n in TOGGLE_NAMES if getattr(self, n)]
        return "+".join(on) if on else "none"


def scaled_k(input_hw) -> int:
    """K=1000 at 1024x1024, scaled by pixel area and floored at 8."""
    area = input_hw[0] * input_hw[1]
    return max(MIN_K, int(round(REFERENCE_K * area / REFERENCE_SIDE ** 2)))


@dataclass
class ModelConfig:
    input_hw: tuple = (128, 128)
    channels: tuple = (8, 16, 32, 64)
    lam: float = 0.2
    k_filter: int | None = None
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    steps: int = 500
    learning_rate: float = 0.05
    batch_size: int = 4

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.channels = tuple(int(v) for v in self.channels)
        if isinstance(self.toggles, dict):
            self.toggles = _toggles_from_dict(self.toggles)
        self.validate()

    @property
    def k(self) -> int:
        return scaled_k(self.input_hw) if self.k_filter is None else int(self.k_filter)

    def validate(self) -> None:
        if len(self.channels) != 4:
            raise ConfigurationError(f"exactly four encoder stages are required, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ConfigurationError("stage widths must be positive")
        if len(self.input_hw) != 2 or any(s < 16 or s % 16 for s in self.input_hw):
            raise ConfigurationError(f"input_hw must be two multiples of 16, got {self.input_hw}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.k_filter is not None and not 0 <= self.k_filter <= self.input_hw[0] * self.input_hw[1]:
            raise ConfigurationError(f"k_filter out of range: {self.k_filter}")
        if self.seed < 0 or self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigurationError("seed/steps must be >= 0, batch_size >= 1, learning_rate >= 0")

    def replace(self, **changes) -> "ModelConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return ModelConfig(**data)

    # ------------------------------------------------------------------ JSON
    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "channels": list(self.channels),
            "lambda": self.lam,
            "k_filter": self.k_filter,
            "toggles": self.toggles.as_dict(),
            "seed": self.seed,
            "training": {"steps": self.steps, "learning_rate": self.learning_rate,
                         "batch_size": self.batch_size},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        allowed = {"input_hw", "channels", "lambda", "k_filter", "toggles", "seed", "training"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key in ("input_hw", "channels", "k_filter", "seed"):
            if key in doc:
                kwargs[key] = doc[key]
        if "lambda" in doc:
            kwargs["lam"] = float(doc["lambda"])
        if "toggles" in doc:
            kwargs["toggles"] = _toggles_from_dict(doc["toggles"])
        if "training" in doc:
            train = doc["training"]
            extra = sorted(set(train) - {"steps", "learning_rate", "batch_size"})
            if extra:
                raise ConfigurationError(f"unknown training keys: {extra}")
            kwargs.update({k: train[k] for k in train})
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)


def _toggles_from_dict(doc: dict) -> Toggles:
    unknown = sorted(set(doc) - set(TOGGLE_NAMES))
    if unknown:
        raise ConfigurationError(f"unknown toggles: {unknown}")
    return Toggles(**{k: bool(v) for k, v in doc.items()})
