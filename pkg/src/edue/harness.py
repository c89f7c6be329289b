"""Experiment drivers: baseline arms, quality control, OOD, comparisons.

Three uncertainty arms share one evaluation path.  The disagreement-
guided model and the label-ensemble baseline are the same multi-head
network trained with different objectives (the baseline sets beta = 0
and trains every head on the majority vote).  The deep ensemble trains
independent full-resolution single-head networks and takes the variance
across members.  A fourth arm, a single-head network fit to one fixed
rater, exists purely as the calibration control.

Downstream tasks consume per-image scalars: quality control ranks
images by summed variance and reports how fast poor segmentations are
flushed out; the OOD experiment tracks how inter-head (or inter-member)
agreement drops when inputs are distorted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .disagreement import (
    EpochStats,
    LossWeights,
    TrainItem,
    majority_labels,
    sample_labels,
    single_rater_labels,
    train,
)
from .metrics import MetricReport, PredictionRecord, evaluate_predictions
from .model import (
    Model,
    ModelConfig,
    aggregate_heads,
    build_model,
    build_single_head_model,
    forward,
    predict,
)
from .raters import RaterSample, binary_dice, distort

# numpy renamed trapz to trapezoid in 2.0; support both.
_trapezoid = getattr(np, "trapezoid", np.trapz)

__all__ = [
    "ArmSettings",
    "QcCurve",
    "OodReport",
    "to_train_items",
    "train_edue",
    "train_le_baseline",
    "train_single_rater_baseline",
    "train_deep_ensemble",
    "ensemble_predict",
    "head_probability_maps",
    "member_probability_maps",
    "predict_records",
    "ensemble_records",
    "evaluate_arm",
    "quality_control",
    "agreement_score",
    "ood_experiment",
    "run_comparison",
]


@dataclass(frozen=True)
class ArmSettings:
    """Shared training schedule for all arms of one comparison.

    The defaults mirror the desk preset; beta is strong enough there
    for the variance-matching term to reorder the summed variance by
    rater disagreement within 30 epochs.
    """
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 10.0
    de_members: int = 3
    head_skip: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.de_members < 2:
            raise ValueError(f"deep ensemble needs >= 2 members, got {self.de_members}")
        if self.head_skip < 0:
            raise ValueError("head_skip must be >= 0")
        LossWeights(alpha=self.alpha, beta=self.beta).validate()


def to_train_items(samples: Sequence[RaterSample], structure: int = 0) -> list[TrainItem]:
    """Project one structure's rater masks out of generator samples."""
    return [TrainItem(image=s.image, masks=s.masks[structure]) for s in samples]


def train_edue(config: ModelConfig, items: Sequence[TrainItem], settings: ArmSettings,
               seed: int) -> tuple[Model, list[EpochStats]]:
    settings.validate()
    model = build_model(replace(config, seed=seed))
    return train(model, items, epochs=settings.epochs, batch_size=settings.batch_size,
                 lr=settings.lr, weights=LossWeights(settings.alpha, settings.beta),
                 rng=np.random.default_rng(seed), sampler=sample_labels)


def train_le_baseline(config: ModelConfig, items: Sequence[TrainItem],
                      settings: ArmSettings, seed: int) -> tuple[Model, list[EpochStats]]:
    """Same multi-head architecture, no disagreement term: every head is
    fit to the soft majority vote."""
    settings.validate()
    model = build_model(replace(config, seed=seed))
    return train(model, items, epochs=settings.epochs, batch_size=settings.batch_size,
                 lr=settings.lr, weights=LossWeights(settings.alpha, 0.0),
                 rng=np.random.default_rng(seed), sampler=majority_labels)


def train_single_rater_baseline(config: ModelConfig, items: Sequence[TrainItem],
                                settings: ArmSettings, seed: int,
                                rater: int = 0) -> tuple[Model, list[EpochStats]]:
    """Single-head network fit to one annotator only: the overconfidence
    control the multi-rater arms are compared against."""
    settings.validate()
    model = build_single_head_model(replace(config, seed=seed))
    return train(model, items, epochs=settings.epochs, batch_size=settings.batch_size,
                 lr=settings.lr, weights=LossWeights(settings.alpha, 0.0),
                 rng=np.random.default_rng(seed), sampler=single_rater_labels(rater))


def train_deep_ensemble(config: ModelConfig, items: Sequence[TrainItem],
                        settings: ArmSettings, seed: int,
                        m_members: int | None = None
                        ) -> tuple[list[Model], list[list[EpochStats]]]:
    """m independently seeded single-head networks on majority labels."""
    settings.validate()
    m = settings.de_members if m_members is None else m_members
    if m < 2:
        raise ValueError(f"deep ensemble needs >= 2 members, got {m}")
    models, traces = [], []
    for i in range(m):
        member_seed = seed + 1000 * (i + 1)
        model = build_single_head_model(replace(config, seed=member_seed))
        _, trace = train(model, items, epochs=settings.epochs,
                         batch_size=settings.batch_size, lr=settings.lr,
                         weights=LossWeights(settings.alpha, 0.0),
                         rng=np.random.default_rng(member_seed),
                         sampler=majority_labels)
        models.append(model)
        traces.append(trace)
    return models, traces


def ensemble_predict(models: Sequence[Model], x: Tensor) -> dict:
    """Mean mask, member-variance heatmap, and its sum; one pass each."""
    if not models:
        raise ValueError("ensemble_predict: empty model list")
    return aggregate_heads([forward(m, x).probs[0].data for m in models])


def head_probability_maps(model: Model, image: np.ndarray,
                          head_skip: int = 0) -> list[np.ndarray]:
    """Per-head probability maps (H, W) for one image."""
    outs = forward(model, Tensor(np.asarray(image)[None]))
    maps = [p.data[0, 0] for p in outs.probs[head_skip:]]
    if len(maps) < 2:
        raise ValueError(f"need >= 2 maps after skipping {head_skip} heads")
    return maps


def member_probability_maps(models: Sequence[Model], image: np.ndarray) -> list[np.ndarray]:
    """Per-member probability maps (H, W) for one image."""
    if len(models) < 2:
        raise ValueError("need >= 2 ensemble members")
    x = Tensor(np.asarray(image)[None])
    return [forward(m, x).probs[0].data[0, 0] for m in models]


def predict_records(model: Model, samples: Sequence[RaterSample], structure: int = 0,
                    head_skip: int = 0) -> list[PredictionRecord]:
    records = []
    for i, s in enumerate(samples):
        out = predict(model, Tensor(np.asarray(s.image)[None]), head_skip=head_skip)
        records.append(PredictionRecord(ident=f"img{i:04d}",
                                        final_mask=out["final_mask"][0, 0],
                                        heatmap=out["heatmap"][0, 0],
                                        rater_masks=s.masks[structure]))
    return records


def ensemble_records(models: Sequence[Model], samples: Sequence[RaterSample],
                     structure: int = 0) -> list[PredictionRecord]:
    records = []
    for i, s in enumerate(samples):
        out = ensemble_predict(models, Tensor(np.asarray(s.image)[None]))
        records.append(PredictionRecord(ident=f"img{i:04d}",
                                        final_mask=out["final_mask"][0, 0],
                                        heatmap=out["heatmap"][0, 0],
                                        rater_masks=s.masks[structure]))
    return records


def evaluate_arm(model_or_models, samples: Sequence[RaterSample], structure: int = 0,
                 head_skip: int = 0) -> MetricReport:
    if isinstance(model_or_models, Model):
        records = predict_records(model_or_models, samples, structure, head_skip)
    else:
        records = ensemble_records(list(model_or_models), samples, structure)
    return evaluate_predictions(records)


# ---------------------------------------------------------------------------
# quality control


@dataclass(frozen=True)
class QcCurve:
    quantiles: list[float]
    remaining_fraction: list[float]
    ideal_fraction: list[float]
    d_auc: float

    def as_dict(self) -> dict:
        return {"quantiles": self.quantiles, "remaining_fraction": self.remaining_fraction,
                "ideal_fraction": self.ideal_fraction, "d_auc": self.d_auc}


def _remaining_poor_curve(sv: np.ndarray, poor: np.ndarray,
                          quantiles: np.ndarray) -> list[float]:
    curve = []
    for q in quantiles:
        cutoff = np.quantile(sv, 1.0 - q)
        retained = sv <= cutoff
        curve.append(float(poor[retained].mean()))
    return curve


def quality_control(dice_scores, sv_scores, dice_threshold: float,
                    quantile_grid=None) -> QcCurve:
    """Remaining-poor-fraction curve when flagging the most-uncertain
    fraction q of images, against the oracle that flags poor ones first.

    At each quantile q, images whose summed variance exceeds the
    (1 - q)-quantile are flagged and removed; the curve reports the poor
    fraction among what remains.  d_auc is the trapezoidal area between
    the achieved curve and the oracle curve (lower is better, 0 = the
    uncertainty ranks poorness perfectly).
    """
    dice = np.asarray(dice_scores, dtype=np.float64)
    sv = np.asarray(sv_scores, dtype=np.float64)
    if dice.shape != sv.shape or dice.ndim != 1:
        raise ValueError("dice and sv must be equal-length 1-D sequences")
    if dice.size < 5:
        raise ValueError(f"quality control needs >= 5 images, got {dice.size}")
    if quantile_grid is None:
        quantile_grid = np.round(np.arange(0.0, 1.0001, 0.05), 10)
    quantiles = np.asarray(quantile_grid, dtype=np.float64)

    poor = dice < dice_threshold
    curve = _remaining_poor_curve(sv, poor, quantiles)

    # Oracle ordering: poor images get the highest (distinct) scores, so
    # the same flagging rule removes them first.
    order = np.argsort(np.where(poor, 1, 0), kind="stable")
    ideal_sv = np.empty(dice.size)
    ideal_sv[order] = np.arange(1.0, dice.size + 1.0)
    ideal = _remaining_poor_curve(ideal_sv, poor, quantiles)

    gap = np.asarray(curve) - np.asarray(ideal)
    d_auc = float(_trapezoid(gap, quantiles))
    return QcCurve(quantiles=quantiles.tolist(), remaining_fraction=curve,
                   ideal_fraction=ideal, d_auc=d_auc)


# ---------------------------------------------------------------------------
# agreement and OOD


def agreement_score(prob_maps: Sequence[np.ndarray]) -> float:
    """Mean pairwise Dice of the maps binarized at 0.5."""
    maps = [np.asarray(m) >= 0.5 for m in prob_maps]
    if len(maps) < 2:
        raise ValueError(f"agreement_score needs >= 2 maps, got {len(maps)}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("agreement_score: maps must share one shape")
    scores = [binary_dice(maps[i], maps[j])
              for i in range(len(maps)) for j in range(i + 1, len(maps))]
    return float(np.mean(scores))


@dataclass(frozen=True)
class OodReport:
    kind: str
    level: float
    per_fraction: list[dict]

    def as_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level, "per_fraction": self.per_fraction}


def _summary(scores: np.ndarray) -> dict:
    return {
        "min": float(scores.min()),
        "q1": float(np.quantile(scores, 0.25)),
        "median": float(np.median(scores)),
        "q3": float(np.quantile(scores, 0.75)),
        "max": float(scores.max()),
        "mean": float(scores.mean()),
    }


def ood_experiment(model_or_models, samples: Sequence[RaterSample], kind: str,
                   level: float, rng: np.random.Generator,
                   fractions: Sequence[float] = (0.0, 0.5, 1.0),
                   head_skip: int = 0) -> OodReport:
    """Distribution of per-image agreement as more inputs get distorted.

    For each fraction f, ceil(f * n) randomly chosen images are distorted
    before prediction; agreement is computed across heads (single model)
    or across members (model list).
    """
    samples = list(samples)
    n = len(samples)
    if n == 0:
        raise ValueError("ood_experiment: empty sample list")
    single = isinstance(model_or_models, Model)
    per_fraction = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fractions must lie in [0, 1], got {f}")
        k = math.ceil(f * n)
        chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
        scores = []
        for i, s in enumerate(samples):
            image = distort(s.image, kind, level, rng) if i in chosen else s.image
            if single:
                maps = head_probability_maps(model_or_models, image, head_skip)
            else:
                maps = member_probability_maps(list(model_or_models), image)
            scores.append(agreement_score(maps))
        arr = np.asarray(scores)
        per_fraction.append({"fraction": float(f), "n_distorted": k,
                             "scores": [float(v) for v in scores],
                             "summary": _summary(arr)})
    return OodReport(kind=kind, level=level, per_fraction=per_fraction)


# ---------------------------------------------------------------------------
# the full comparison


def _count_passes(models) -> int:
    if isinstance(models, Model):
        return models.trunk_passes
    return sum(m.trunk_passes for m in models)


def run_comparison(train_samples: Sequence[RaterSample],
                   test_samples: Sequence[RaterSample], config: ModelConfig,
                   settings: ArmSettings, seeds: Sequence[int] = (1, 2, 3)) -> dict:
    """Train and evaluate all three arms per seed and per structure.

    Returns a JSON-ready report: per-seed metric tables for each arm
    plus mean/std aggregation over seeds, forward-pass counts per
    prediction, and parameter counts.
    """
    settings.validate()
    if not seeds:
        raise ValueError("run_comparison: need at least one seed")
    structures = list(train_samples[0].structure_names)
    arms: dict[str, dict] = {name: {"per_seed": []} for name in ("edue", "le", "de")}

    for seed in seeds:
        trained = {}
        for name in arms:
            row: dict = {"seed": seed, "structures": {}, "nll_values": []}
            for k, struct in enumerate(structures):
                items = to_train_items(train_samples, structure=k)
                if name == "edue":
                    model, _ = train_edue(config, items, settings, seed)
                    predictor = model
                elif name == "le":
                    model, _ = train_le_baseline(config, items, settings, seed)
                    predictor = model
                else:
                    members, _ = train_deep_ensemble(config, items, settings, seed)
                    predictor = members
                passes_before = _count_passes(predictor)
                head_skip = settings.head_skip if name in ("edue", "le") else 0
                report = evaluate_arm(predictor, test_samples, structure=k,
                                      head_skip=head_skip)
                passes_used = _count_passes(predictor) - passes_before
                row["structures"][struct] = {
                    "sr": report.dataset["sr"],
                    "dc": report.dataset["dc"],
                    "ncc": report.dataset["mean_ncc"],
                    "dice": report.dataset["mean_dice"],
                }
                row["nll_values"].append(report.dataset["mean_nll"])
                row["passes_per_image"] = passes_used / len(test_samples)
                trained[(name, k)] = predictor
            row["nll"] = float(np.mean(row["nll_values"]))
            del row["nll_values"]
            if name == "de":
                members = trained[(name, 0)]
                row["parameter_count"] = int(sum(m.parameter_count() for m in members))
            else:
                row["parameter_count"] = trained[(name, 0)].parameter_count()
            arms[name]["per_seed"].append(row)

    for name, arm in arms.items():
        flat: dict[str, list[float]] = {}
        for row in arm["per_seed"]:
            for struct, vals in row["structures"].items():
                for metric, value in vals.items():
                    flat.setdefault(f"{struct}.{metric}", []).append(value)
            flat.setdefault("nll", []).append(row["nll"])
        arm["summary"] = {
            key: {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
            for key, vals in flat.items()
        }
    return {
        "seeds": list(seeds),
        "structures": structures,
        "settings": {
            "epochs": settings.epochs, "batch_size": settings.batch_size,
            "lr": settings.lr, "alpha": settings.alpha, "beta": settings.beta,
            "de_members": settings.de_members, "head_skip": settings.head_skip,
        },
        "arms": arms,
    }
