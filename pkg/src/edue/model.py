"""Encoder-decoder segmentation network with a head after every decoder level.

One forward pass yields every head's full-resolution probability map.  The
encoder is ``n_e`` blocks of conv / channel-norm / relu followed by a
stride-2 conv; the decoder mirrors it with ``n_d = n_e - 1`` blocks of
nearest upsampling, skip concatenation, and conv / norm / relu.  Each head
is a 1x1 conv on its decoder level, nearest-upsampled to input resolution
before the sigmoid, so head variance is defined per input pixel.

``build_single_head_model`` builds the ensemble-member variant: the same
encoder, a decoder extended one level to full resolution (using the
full-resolution skip the multi-head model leaves unused), and a single
head.  That is the classic one-output U-Net the deep-ensemble baseline
trains copies of.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import atomic_write_text, load_container, save_container

__all__ = [
    "ModelConfig",
    "HeadOutputs",
    "Model",
    "build_model",
    "build_single_head_model",
    "full_scale_config",
    "forward",
    "predict",
    "aggregate_heads",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    n_e: int = 4
    n_d: int = 3
    in_channels: int = 1
    base_channels: int = 8
    channel_growth: int = 2
    input_size: tuple[int, int] = (32, 32)
    head_hidden: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_e < 2:
            raise ValueError(f"n_e must be >= 2, got {self.n_e}")
        if self.n_d != self.n_e - 1:
            raise ValueError(f"n_d must equal n_e - 1 (got n_d={self.n_d}, n_e={self.n_e})")
        if self.in_channels < 1 or self.base_channels < 1 or self.channel_growth < 1:
            raise ValueError("channel counts and growth must be positive")
        if self.head_hidden < 0:
            raise ValueError("head_hidden must be >= 0")
        h, w = self.input_size
        div = 1 << self.n_e
        if h % div or w % div:
            raise ValueError(f"input size {self.input_size} must be divisible by 2^n_e = {div}")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * self.channel_growth ** i for i in range(self.n_e)]


def full_scale_config(in_channels: int = 3, seed: int = 0) -> ModelConfig:
    """Full-scale preset: six encoder levels, five heads, 256x256 inputs."""
    return ModelConfig(n_e=6, n_d=5, in_channels=in_channels, base_channels=8,
                       channel_growth=2, input_size=(256, 256), seed=seed)


@dataclass
class HeadOutputs:
    """All head probability maps from one pass, full input resolution each."""
    probs: list[Tensor]
    logits: list[Tensor]
    heatmap: Tensor | None = None


class Model:
    """Parameter store plus forward pass; weights mutate only in training.

    ``trunk_passes`` counts forward executions and ``block_calls`` counts
    per-block executions, backing the single-pass contract tests.
    """

    def __init__(self, config: ModelConfig, kind: str, params: dict[str, Tensor]):
        self.config = config
        self.kind = kind  # "multi_head" | "single_head_full"
        self.params = params
        self.trunk_passes = 0
        self.block_calls: dict[str, int] = {}

    @property
    def n_heads(self) -> int:
        return self.config.n_d if self.kind == "multi_head" else 1

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _count(self, block: str) -> None:
        self.block_calls[block] = self.block_calls.get(block, 0) + 1

    def weights_hash(self) -> int:
        acc = 0
        for name in sorted(self.params):
            acc = zlib.crc32(self.params[name].data.tobytes(), acc)
        return acc


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))


def _init_params(config: ModelConfig, kind: str) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    enc = config.encoder_channels()
    params: dict[str, Tensor] = {}

    def conv(name: str, cin: int, cout: int, k: int) -> None:
        params[f"{name}.w"] = Tensor(_he_conv(rng, cout, cin, k), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def norm(name: str, c: int) -> None:
        params[f"{name}.gain"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.gain")
        params[f"{name}.shift"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.shift")

    cin = config.in_channels
    for i, cout in enumerate(enc):
        conv(f"enc{i}.conv", cin, cout, 3)
        norm(f"enc{i}.norm", cout)
        conv(f"enc{i}.down", cout, cout, 3)
        cin = cout

    n_dec = config.n_d if kind == "multi_head" else config.n_e
    prev = enc[-1]
    for j in range(n_dec):
        skip = enc[config.n_e - 1 - j]
        cout = enc[max(config.n_e - 2 - j, 0)]
        conv(f"dec{j}.conv", prev + skip, cout, 3)
        norm(f"dec{j}.norm", cout)
        prev = cout

    def head(name: str, cin_h: int) -> None:
        if config.head_hidden > 0:
            conv(f"{name}.hidden", cin_h, config.head_hidden, 1)
            conv(f"{name}.out", config.head_hidden, 1, 1)
        else:
            conv(f"{name}.out", cin_h, 1, 1)

    if kind == "multi_head":
        for j in range(config.n_d):
            head(f"head{j}", enc[config.n_e - 2 - j])
    else:
        head("head0", enc[0])
    return params


def build_model(config: ModelConfig) -> Model:
    """Multi-head model; deterministic weights given config.seed."""
    config.validate()
    return Model(config, "multi_head", _init_params(config, "multi_head"))


def build_single_head_model(config: ModelConfig) -> Model:
    """Full-resolution single-head U-Net on the same encoder trunk."""
    config.validate()
    return Model(config, "single_head_full", _init_params(config, "single_head_full"))


def _block(model: Model, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    p = model.params
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)


def _head_logits(model: Model, name: str, x: Tensor) -> Tensor:
    p = model.params
    if model.config.head_hidden > 0:
        h = ad.relu(ad.conv2d(x, p[f"{name}.hidden.w"], p[f"{name}.hidden.b"], padding=0))
        return ad.conv2d(h, p[f"{name}.out.w"], p[f"{name}.out.b"], padding=0)
    return ad.conv2d(x, p[f"{name}.out.w"], p[f"{name}.out.b"], padding=0)


def forward(model: Model, x: Tensor) -> HeadOutputs:
    """One trunk pass; every head map comes back at input resolution."""
    cfg = model.config
    b, c, h, w = x.data.shape
    if (c, h, w) != (cfg.in_channels, *cfg.input_size):
        raise ad.ShapeError(f"forward: input shape {x.data.shape} does not match "
                            f"config (*, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]})")
    model.trunk_passes += 1
    p = model.params

    skips: list[Tensor] = []
    cur = x
    for i in range(cfg.n_e):
        model._count(f"enc{i}")
        a = ad.relu(ad.channel_norm(_block(model, f"enc{i}.conv", cur),
                                    p[f"enc{i}.norm.gain"], p[f"enc{i}.norm.shift"]))
        skips.append(a)
        cur = _block(model, f"enc{i}.down", a, stride=2)

    n_dec = cfg.n_d if model.kind == "multi_head" else cfg.n_e
    logits: list[Tensor] = []
    for j in range(n_dec):
        model._count(f"dec{j}")
        up = ad.upsample_nearest(cur, 2)
        cur = ad.concat_channels([up, skips[cfg.n_e - 1 - j]])
        cur = ad.relu(ad.channel_norm(_block(model, f"dec{j}.conv", cur),
                                      p[f"dec{j}.norm.gain"], p[f"dec{j}.norm.shift"]))
        if model.kind == "multi_head":
            factor = 1 << (cfg.n_e - 1 - j)
            logits.append(ad.upsample_nearest(_head_logits(model, f"head{j}", cur), factor))
    if model.kind != "multi_head":
        logits.append(_head_logits(model, "head0", cur))

    probs = [ad.sigmoid(z) for z in logits]
    return HeadOutputs(probs=probs, logits=logits)


def aggregate_heads(probs: list[np.ndarray]) -> dict:
    """Mean map, per-pixel population variance heatmap, and its sum.

    Accumulates in float64 so identical maps give an exactly zero
    heatmap even when the inputs are float32.
    """
    stacked = np.stack(probs, axis=0).astype(np.float64)
    final = stacked.mean(axis=0)
    heatmap = stacked.var(axis=0)
    return {"final_mask": final, "heatmap": heatmap, "sv": float(heatmap.sum())}


def predict(model: Model, x: Tensor, head_skip: int = 0) -> dict:
    """Inference: mean-of-heads mask, head-variance heatmap, variance sum.

    head_skip drops that many leading (coarsest) heads from the
    aggregation; at least two heads must remain.
    """
    outs = forward(model, x)
    maps = [pr.data for pr in outs.probs[head_skip:]]
    if len(maps) < 2:
        raise ValueError(f"predict: need >= 2 heads after skipping {head_skip}, "
                         f"model has {len(outs.probs)}")
    return aggregate_heads(maps)


def parameter_count(config: ModelConfig, kind: str = "multi_head") -> int:
    """Closed-form parameter count for a config, without building it."""
    enc = config.encoder_channels()
    total = 0
    cin = config.in_channels
    for cout in enc:
        total += cout * cin * 9 + cout          # conv
        total += 2 * cout                        # norm
        total += cout * cout * 9 + cout          # downsample
        cin = cout
    n_dec = config.n_d if kind == "multi_head" else config.n_e
    prev = enc[-1]
    head_ins = []
    for j in range(n_dec):
        skip = enc[config.n_e - 1 - j]
        cout = enc[max(config.n_e - 2 - j, 0)]
        total += cout * (prev + skip) * 9 + cout
        total += 2 * cout
        prev = cout
        head_ins.append(cout)
    heads = head_ins if kind == "multi_head" else [prev]
    for c in heads:
        if config.head_hidden > 0:
            total += config.head_hidden * c + config.head_hidden
            total += config.head_hidden + 1
        else:
            total += c + 1
    return total


def save_checkpoint(directory: str | Path, model: Model) -> None:
    """Write weights.edt plus a model.json header describing the config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_container(directory / "weights.edt",
                   {name: p.data for name, p in model.params.items()})
    header = {"kind": model.kind, "config": asdict(model.config)}
    atomic_write_text(directory / "model.json",
                      json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path) -> Model:
    directory = Path(directory)
    header = json.loads((directory / "model.json").read_text())
    raw = dict(header["config"])
    raw["input_size"] = tuple(raw["input_size"])
    config = ModelConfig(**raw)
    model = build_model(config) if header["kind"] == "multi_head" else build_single_head_model(config)
    weights = load_container(directory / "weights.edt")
    if set(weights) != set(model.params):
        missing = set(model.params) ^ set(weights)
        raise ValueError(f"checkpoint does not match config; mismatched entries: {sorted(missing)}")
    for name, arr in weights.items():
        if arr.shape != model.params[name].data.shape:
            raise ValueError(f"checkpoint entry {name!r} has shape {arr.shape}, "
                             f"expected {model.params[name].data.shape}")
        model.params[name].data = arr.astype(ad.default_dtype())
    return model
