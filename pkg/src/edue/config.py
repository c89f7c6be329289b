"""Run configuration: one flat, hand-validated JSON document per run.

A RunConfig bundles everything a run needs: model shape, loss weights,
scene parameters for the generator, and the training schedule.  Three
presets cover the supported regimes: "desk" (small, minutes on one
core) and two full-scale presets ("riga-like", "hecktor-like") sized
for fundus-style and tumor-style workloads.

A config file is a JSON object with an optional "preset" key plus any
overrides.  Unknown keys are rejected rather than ignored: a typo in a
config must fail loudly, not silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .container import atomic_write_text
from .disagreement import LossWeights
from .harness import ArmSettings
from .model import ModelConfig
from .raters import SceneParams

__all__ = [
    "ConfigError",
    "RunConfig",
    "PRESET_NAMES",
    "preset",
    "from_dict",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Invalid, unknown, or ill-typed configuration content."""


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # model shape
    n_e: int = 4
    n_d: int = 3
    in_channels: int = 1
    base_channels: int = 8
    channel_growth: int = 2
    head_hidden: int = 0
    input_size: tuple[int, int] = (32, 32)
    # loss; desk beta calibrated empirically on the synthetic generator,
    # the full-scale presets carry their own per-dataset values
    alpha: float = 1.0
    beta: float = 10.0
    # scene generator
    n_raters: int = 4
    delta_low: float = 0.5
    delta_high: float = 3.0
    ambiguity_mix: float = 0.5
    texture_noise: float = 0.05
    structure: str = "single_blob"
    # schedule
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    de_members: int = 3
    head_skip: int = 0
    # dataset sizes
    n_train: int = 200
    n_test: int = 100

    def model_config(self, seed: int | None = None) -> ModelConfig:
        return ModelConfig(n_e=self.n_e, n_d=self.n_d, in_channels=self.in_channels,
                           base_channels=self.base_channels,
                           channel_growth=self.channel_growth,
                           input_size=self.input_size, head_hidden=self.head_hidden,
                           seed=self.seed if seed is None else seed)

    def scene_params(self, seed: int | None = None) -> SceneParams:
        return SceneParams(image_size=self.input_size, n_raters=self.n_raters,
                           delta_low=self.delta_low, delta_high=self.delta_high,
                           ambiguity_mix=self.ambiguity_mix,
                           texture_noise=self.texture_noise,
                           structure=self.structure, channels=self.in_channels,
                           seed=self.seed if seed is None else seed)

    def arm_settings(self) -> ArmSettings:
        return ArmSettings(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, alpha=self.alpha, beta=self.beta,
                           de_members=self.de_members, head_skip=self.head_skip)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)

    def validate(self) -> None:
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; "
                              f"expected one of {sorted(PRESET_NAMES)}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        try:
            self.model_config().validate()
            self.scene_params().validate()
            self.arm_settings().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self) -> dict:
        doc = asdict(self)
        doc["input_size"] = list(self.input_size)
        return doc


# The full-scale presets pin the full-run constants (epochs, batch
# size, learning rate, beta, ensemble size, LE head skip) on top of the
# six-level architecture; dataset sizes are stand-ins for generator
# runs at that scale.
_PRESETS: dict[str, dict] = {
    "desk": {},
    "riga-like": dict(
        n_e=6, n_d=5, in_channels=3, input_size=(256, 256),
        beta=5.0, n_raters=6, structure="nested",
        epochs=200, batch_size=16, lr=5e-5, de_members=5, head_skip=5,
        n_train=600, n_test=150,
    ),
    "hecktor-like": dict(
        n_e=6, n_d=5, in_channels=2, input_size=(128, 128),
        beta=2.5, n_raters=3, structure="single_blob",
        epochs=120, batch_size=32, lr=5e-5, de_members=5, head_skip=5,
        n_train=400, n_test=100,
    ),
}
PRESET_NAMES = tuple(_PRESETS)

_INT_KEYS = {"seed", "n_e", "n_d", "in_channels", "base_channels",
             "channel_growth", "head_hidden", "n_raters", "epochs",
             "batch_size", "de_members", "head_skip", "n_train", "n_test"}
_FLOAT_KEYS = {"alpha", "beta", "delta_low", "delta_high", "ambiguity_mix",
               "texture_noise", "lr"}
_STR_KEYS = {"preset", "structure"}


def preset(name: str) -> RunConfig:
    """The named preset with no overrides."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; "
                          f"expected one of {sorted(_PRESETS)}")
    config = RunConfig(preset=name, **_PRESETS[name])
    config.validate()
    return config


def _coerce(key: str, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, "
                              f"got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, "
                              f"got {value!r}")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, "
                              f"got {value!r}")
        return value
    if key == "input_size":
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or any(isinstance(v, bool) or not isinstance(v, int)
                       for v in value)):
            raise ConfigError("config key 'input_size' must be a pair of "
                              f"integers, got {value!r}")
        return (value[0], value[1])
    raise ConfigError(f"unknown config key {key!r}")


def from_dict(doc: dict) -> RunConfig:
    """Build and validate a RunConfig from a JSON-shaped dict.

    Values start from the named preset (default "desk"); every other
    key overrides one field.  Unknown keys are an error.
    """
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    name = _coerce("preset", doc.get("preset", "desk"))
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; "
                          f"expected one of {sorted(_PRESETS)}")
    merged: dict = {"preset": name, **_PRESETS[name]}
    for key, value in doc.items():
        if key == "preset":
            continue
        merged[key] = _coerce(key, value)
    config = RunConfig(**merged)
    config.validate()
    return config


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)


def save_config(path: str | os.PathLike, config: RunConfig) -> None:
    """Write the config as sorted-key JSON, atomically."""
    text = json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n"
    atomic_write_text(path, text)
