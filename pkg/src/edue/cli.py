"""Command-line surface: generate data, train, evaluate, QC, OOD, compare.

    edue gen-data --preset desk --n 200 --out d/
    edue train    --data d/ --preset desk --out m/
    edue eval     --model m/ --data d/ --out report.json
    edue qc       --model m/ --data d/ --out qc.json --dice-threshold 0.7
    edue ood      --model m/ --data d/ --out ood.json --kind gauss_noise --level 0.3
    edue compare  --train-data d/ --test-data t/ --out cmp.json --seeds 1,2,3
    edue inspect  d/img_0000.edt

Exit codes: 0 success, 1 usage error, 2 data or validation error.  All
diagnostics go to stderr; machine-readable output goes to files (every
report is written as sorted-key JSON plus a CSV a plotting tool can
consume directly).  Reports are byte-identical across reruns with the
same inputs and seed.

Seed precedence: --seed flag, then the EDUE_SEED environment variable,
then the config's seed field.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .config import ConfigError, PRESET_NAMES, RunConfig, load_config, preset
from .container import ContainerError, entry_table
from .harness import (
    evaluate_arm,
    ood_experiment,
    quality_control,
    run_comparison,
    to_train_items,
    train_deep_ensemble,
    train_edue,
    train_le_baseline,
    train_single_rater_baseline,
)
from .raters import DISTORTION_KINDS, generate_dataset
from .storage import (
    DataError,
    load_checkpoint_dir,
    load_dataset,
    save_checkpoint_dir,
    save_dataset,
    write_csv,
    write_json,
)

__all__ = ["main", "build_parser"]

ARM_CHOICES = ("edue", "le", "de", "single-rater")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None) is not None:
        return load_config(args.config)
    return preset(getattr(args, "preset", None) or "desk")


def _seed_from_env() -> int | None:
    raw = os.environ.get("EDUE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"EDUE_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(args: argparse.Namespace, config_seed: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = _seed_from_env()
    return env if env is not None else config_seed


def _note(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    seed = _resolve_seed(args, config.seed)
    n = args.n if args.n is not None else config.n_train
    params = config.scene_params(seed=seed)
    samples, manifest = generate_dataset(params, n, np.random.default_rng(seed))
    manifest["seed"] = seed
    manifest["preset"] = config.preset
    save_dataset(args.out, samples, manifest)
    _note(f"wrote {n} images to {args.out}")
    return 0


def _structure_index(args: argparse.Namespace, structures: list[str]) -> int:
    k = args.structure
    if not 0 <= k < len(structures):
        raise DataError(f"structure index {k} out of range; dataset has "
                        f"{structures}")
    return k


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    seed = _resolve_seed(args, config.seed)
    samples, manifest = load_dataset(args.data)
    structures = list(manifest["structures"])
    k = _structure_index(args, structures)
    items = to_train_items(samples, structure=k)
    settings = config.arm_settings()
    model_config = config.model_config()
    arm = args.arm.replace("-", "_")
    if arm == "edue":
        model, trace = train_edue(model_config, items, settings, seed)
        models, traces = [model], [trace]
    elif arm == "le":
        model, trace = train_le_baseline(model_config, items, settings, seed)
        models, traces = [model], [trace]
    elif arm == "single_rater":
        model, trace = train_single_rater_baseline(model_config, items,
                                                   settings, seed)
        models, traces = [model], [trace]
    else:
        models, traces = train_deep_ensemble(model_config, items, settings, seed)
    head_skip = settings.head_skip if arm in ("edue", "le") else 0
    meta = {
        "config": config.as_dict(),
        "seed": seed,
        "structure": k,
        "structure_name": structures[k],
        "head_skip": head_skip,
    }
    save_checkpoint_dir(args.out, "de" if arm == "de" else arm, models,
                        traces, meta)
    last = traces[-1][-1]
    _note(f"trained {arm} ({len(models)} model(s), {settings.epochs} epochs); "
          f"final mean loss {last.mean_total:.4f}; checkpoint in {args.out}")
    return 0


def _load_predictor(args: argparse.Namespace):
    predictor, meta = load_checkpoint_dir(args.model)
    samples, manifest = load_dataset(args.data)
    structures = list(manifest["structures"])
    k = int(meta.get("structure", 0))
    if k >= len(structures):
        raise DataError(f"checkpoint was trained on structure index {k}, but "
                        f"the dataset has only {structures}")
    return predictor, meta, samples, k


def cmd_eval(args: argparse.Namespace) -> int:
    predictor, meta, samples, k = _load_predictor(args)
    head_skip = int(meta.get("head_skip", 0))
    report = evaluate_arm(predictor, samples, structure=k, head_skip=head_skip)
    out = Path(args.out)
    write_json(out, {
        "arm": meta.get("arm"),
        "structure": meta.get("structure_name"),
        "train_meta": meta,
        "per_image": report.per_image,
        "dataset": report.dataset,
    })
    columns = ["id", "soft_dice", "nll", "sv_model", "sv_gt", "ncc"]
    write_csv(out.with_suffix(".csv"), columns,
              [[rec[c] for c in columns] for rec in report.per_image])
    _note(f"evaluated {len(report.per_image)} images; report in {out}")
    return 0


def cmd_qc(args: argparse.Namespace) -> int:
    predictor, meta, samples, k = _load_predictor(args)
    head_skip = int(meta.get("head_skip", 0))
    report = evaluate_arm(predictor, samples, structure=k, head_skip=head_skip)
    dice = [rec["soft_dice"] for rec in report.per_image]
    sv = [rec["sv_model"] for rec in report.per_image]
    curve = quality_control(dice, sv, args.dice_threshold)
    out = Path(args.out)
    write_json(out, {
        "arm": meta.get("arm"),
        "structure": meta.get("structure_name"),
        "dice_threshold": args.dice_threshold,
        "train_meta": meta,
        **curve.as_dict(),
    })
    write_csv(out.with_suffix(".csv"),
              ["quantile", "remaining_fraction", "ideal_fraction"],
              list(zip(curve.quantiles, curve.remaining_fraction,
                       curve.ideal_fraction)))
    _note(f"d_auc {curve.d_auc:.4f} at dice threshold {args.dice_threshold}; "
          f"report in {out}")
    return 0


def _parse_fractions(raw: str) -> tuple[float, ...]:
    try:
        fractions = tuple(float(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--fractions must be comma-separated numbers, "
                          f"got {raw!r}") from None
    if not fractions:
        raise ConfigError("--fractions must name at least one fraction")
    return fractions


def cmd_ood(args: argparse.Namespace) -> int:
    predictor, meta, samples, _ = _load_predictor(args)
    seed = _resolve_seed(args, int(meta.get("seed", 0)))
    head_skip = int(meta.get("head_skip", 0))
    report = ood_experiment(predictor, samples, args.kind, args.level,
                            rng=np.random.default_rng(seed),
                            fractions=_parse_fractions(args.fractions),
                            head_skip=head_skip)
    out = Path(args.out)
    write_json(out, {
        "arm": meta.get("arm"),
        "seed": seed,
        "train_meta": meta,
        **report.as_dict(),
    })
    stats = ["min", "q1", "median", "q3", "max", "mean"]
    write_csv(out.with_suffix(".csv"), ["fraction", "n_distorted"] + stats,
              [[row["fraction"], row["n_distorted"]]
               + [row["summary"][s] for s in stats]
               for row in report.per_fraction])
    _note(f"ood report over fractions {args.fractions} in {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, "
                          f"got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    train_samples, _ = load_dataset(args.train_data)
    test_samples, _ = load_dataset(args.test_data)
    report = run_comparison(train_samples, test_samples, config.model_config(),
                            config.arm_settings(), seeds=seeds)
    report["preset"] = config.preset
    report["config"] = config.as_dict()
    out = Path(args.out)
    write_json(out, report)
    rows = []
    for arm in sorted(report["arms"]):
        summary = report["arms"][arm]["summary"]
        for metric in sorted(summary):
            rows.append([arm, metric, summary[metric]["mean"],
                         summary[metric]["std"]])
    write_csv(out.with_suffix(".csv"), ["arm", "metric", "mean", "std"], rows)
    _note(f"compared {sorted(report['arms'])} over seeds {list(seeds)}; "
          f"report in {out}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    rows = entry_table(args.path)
    total = sum(nbytes for _, _, nbytes in rows)
    print(f"{args.path}: {len(rows)} entries, {total} payload bytes")
    for name, shape, nbytes in rows:
        dims = "x".join(str(d) for d in shape) if shape else "scalar"
        print(f"  {name}  {dims}  {nbytes} bytes")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--preset", choices=PRESET_NAMES,
                       help="named configuration preset (default: desk)")
    group.add_argument("--config", help="path to a RunConfig JSON file")
    sub.add_argument("--seed", type=int, help="overrides EDUE_SEED and the "
                     "config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edue",
        description="Disagreement-guided uncertainty estimation for "
                    "segmentation: data generation, training, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-rater "
                                        "dataset directory")
    _add_config_flags(p)
    p.add_argument("--n", type=int, help="number of images (default: the "
                   "config's n_train)")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one arm on a dataset directory")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--arm", choices=ARM_CHOICES, default="edue")
    p.add_argument("--structure", type=int, default=0,
                   help="structure index to train on (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report JSON path (a CSV of "
                   "per-image rows lands next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("qc", help="quality-control curve from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dice-threshold", type=float, default=0.7,
                   help="dice below this marks a segmentation poor")
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("ood", help="agreement distributions under distortion")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=DISTORTION_KINDS, default="gauss_noise")
    p.add_argument("--level", type=float, default=0.3)
    p.add_argument("--fractions", default="0,0.5,1",
                   help="comma-separated distorted fractions")
    p.add_argument("--seed", type=int, help="overrides EDUE_SEED and the "
                   "checkpoint seed")
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("compare", help="train and evaluate all arms over seeds")
    _add_config_flags(p)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="1,2,3",
                   help="comma-separated training seeds")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="print a tensor container's entry table")
    p.add_argument("path", help="container file")
    p.set_defaults(func=cmd_inspect)
    return parser


def _fail(prefix: str, exc: BaseException) -> int:
    print(f"{prefix}: {exc}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; our contract reserves 2 for
        # data errors and reports usage errors as 1.
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config error", exc)
    except ContainerError as exc:
        return _fail("container error", exc)
    except DataError as exc:
        return _fail("data error", exc)
    except FileNotFoundError as exc:
        return _fail("missing file", exc)
    except FloatingPointError as exc:
        return _fail("training error", exc)
    except (ValueError, ShapeError, OSError) as exc:
        return _fail("data error", exc)


if __name__ == "__main__":
    raise SystemExit(main())
