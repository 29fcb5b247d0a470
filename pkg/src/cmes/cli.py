"""Command-line entry point: gen, train, eval, ablate."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset, SyntheticConfig, filter_dataset, generate_synthetic, load_dataset, load_ground_truth, write_dataset,
)
from .errors import CMESError, UndefinedMetricError, ValidationError
from .metrics import mastery_recovery
from .models import ModelKind
from .training import (
    STRATEGIES, TrainConfig, evaluate_split, load_checkpoint, model_from_checkpoint, prepare_splits, save_checkpoint,
    train,
)

logger = logging.getLogger("cmes")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ROOT_ENV = "CMES_OUTPUT_ROOT"
RESOLVED = "resolved_config.json"

# flag -> (TrainConfig field, type)
TRAIN_FLAGS = {
    "model": ("model", str), "strategy": ("strategy", str), "n": ("n", int), "clusters": ("clusters", int),
    "alpha_w": ("alpha_w", float), "beta_w": ("beta_w", float), "balance": ("balance", float),
    "batch": ("batch_size", int), "epochs": ("epochs", int), "seed": ("seed", int),
    "train_frac": ("train_frac", float), "lr": ("lr", float), "patience": ("patience", int),
    "dim": ("dim", int),
}
SAMPLING_FIELDS = ("n", "clusters", "alpha_w", "beta_w", "balance")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------- data sources

def add_data_args(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="directory with interactions.csv and q_matrix.csv")
    src.add_argument("--interactions", type=Path, help="interaction file (needs --q-matrix)")
    src.add_argument("--synthetic", action="store_true", help="generate the dataset in memory")
    p.add_argument("--q-matrix", type=Path)
    p.add_argument("--min-logs", type=int, default=None, help="drop students with fewer logs (default 15)")
    g = p.add_argument_group("synthetic data")
    g.add_argument("--students", type=int, default=1000)
    g.add_argument("--exercises", type=int, default=300)
    g.add_argument("--concepts", type=int, default=20)
    g.add_argument("--logs", type=int, default=40)
    g.add_argument("--data-seed", type=int, default=0)


def data_spec(args) -> dict:
    min_logs = 15 if args.min_logs is None else args.min_logs
    if args.synthetic:
        cfg = SyntheticConfig(args.students, args.exercises, args.concepts, args.logs)
        return {"kind": "synthetic", "config": asdict(cfg), "seed": args.data_seed, "min_logs": min_logs}
    if args.interactions is not None:
        if args.q_matrix is None:
            raise ValidationError("--interactions needs --q-matrix")
        return {"kind": "files", "interactions": str(args.interactions.resolve()),
                "q_matrix": str(args.q_matrix.resolve()), "min_logs": min_logs}
    if args.data is not None:
        return {"kind": "dir", "path": str(args.data.resolve()), "min_logs": min_logs}
    return {}


def load_from_spec(spec: dict) -> tuple[Dataset, np.ndarray | None]:
    """Dataset plus the ground-truth mastery rows aligned with the filtered students."""
    kind = spec.get("kind")
    truth = None
    if kind == "synthetic":
        cfg = dict(spec["config"])
        cfg["concepts_per_exercise"] = tuple(cfg["concepts_per_exercise"])
        cfg["discrimination_range"] = tuple(cfg["discrimination_range"])
        dataset, gt = generate_synthetic(SyntheticConfig(**cfg), seed=spec["seed"])
        raw_students = list(range(dataset.num_students))
        truth = gt.mastery
    elif kind in ("dir", "files"):
        if kind == "dir":
            root = Path(spec["path"])
            inter, qm = root / "interactions.csv", root / "q_matrix.csv"
            gt_path = root / "ground_truth.json"
        else:
            inter, qm = Path(spec["interactions"]), Path(spec["q_matrix"])
            gt_path = inter.parent / "ground_truth.json"
        dataset, ids = load_dataset(inter, qm)
        raw_students = [int(s) if s.lstrip("-").isdigit() else None for s in ids.students]
        if gt_path.exists() and None not in raw_students:
            truth = load_ground_truth(gt_path).mastery
    else:
        raise ValidationError("no data source: pass --data DIR, --interactions/--q-matrix or --synthetic")

    counts = np.bincount([t.student for t in dataset.interactions], minlength=dataset.num_students)
    kept = [raw_students[s] for s in range(dataset.num_students) if counts[s] >= spec["min_logs"]]
    dataset = filter_dataset(dataset, spec["min_logs"])
    if truth is not None:
        truth = truth[kept] if max(kept, default=-1) < len(truth) else None
    return dataset, truth


# --------------------------------------------------------------------------- config resolution

def add_train_args(p: argparse.ArgumentParser):
    p.add_argument("--model", choices=[k.value for k in ModelKind])
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--n", type=int, help="sampled exercises attached per interacted exercise")
    p.add_argument("--clusters", type=int, help="student clusters W (0 disables the constraint)")
    p.add_argument("--alpha-w", type=float)
    p.add_argument("--beta-w", type=float)
    p.add_argument("--balance", type=float, help="weight of the feedback loss")
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--dim", type=int)


def resolve_train_config(args, base: dict | None = None) -> TrainConfig:
    values = dict(base or {})
    given = {}
    for flag, (name, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = given[name] = v
    config = TrainConfig.from_dict(values)
    if config.strategy == "original":
        ignored = [k for k in SAMPLING_FIELDS if k in given]
        if ignored:
            logger.warning("strategy=original ignores %s", ", ".join("--" + k.replace("_", "-") for k in ignored))
    elif config.strategy == "rss" and "clusters" in given:
        logger.warning("strategy=rss ignores --clusters")
    return config.validate()


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = SyntheticConfig(args.students, args.exercises, args.concepts, args.logs,
                          concepts_per_exercise=tuple(args.concepts_per_exercise), temperature=args.temperature)
    cfg.validate()
    out = prepare_out(args.out or output_root() / f"synthetic-{args.seed}", args.force)
    dataset, truth = generate_synthetic(cfg, seed=args.seed)
    write_dataset(dataset, out, truth)
    (out / "synthetic_config.json").write_text(json.dumps({"config": asdict(cfg), "seed": args.seed},
                                                          indent=2, sort_keys=True) + "\n")
    positive = float(np.mean([t.response for t in dataset.interactions]))
    print(f"students={dataset.num_students} exercises={dataset.num_exercises} concepts={dataset.num_concepts} "
          f"logs={len(dataset.interactions)} positive_rate={positive:.4f} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    base, spec = {}, data_spec(args)
    if args.config is not None:
        resolved = json.loads(Path(args.config).read_text())
        base = resolved["train"]
        spec = spec or resolved["data"]
    config = resolve_train_config(args, base)
    dataset, _ = load_from_spec(spec)
    out = prepare_out(args.out or output_root() / f"{config.strategy}-{config.model}-seed{config.seed}", args.force)
    splits = prepare_splits(dataset, config)
    resolved = {"version": __version__, "train": config.to_dict(), "config_hash": config.hash(),
                "data": spec, "data_hash": splits.fingerprint()}
    (out / RESOLVED).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    metrics = out / "metrics.csv"
    metrics.unlink(missing_ok=True)
    result = train(config, dataset, splits, metrics_path=metrics, divergence_dir=out)
    save_checkpoint(result.checkpoint, out / "checkpoint.pt")
    report = result.test_report
    if report is not None:
        with (out / "reports.jsonl").open("a") as fh:
            fh.write(report.to_json() + "\n")
        print(report.to_json())
    print(f"best epoch {result.best_epoch}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    ckpt_path = run / "checkpoint.pt"
    if not ckpt_path.exists():
        raise ValidationError(f"no checkpoint at {ckpt_path}")
    resolved = json.loads((run / RESOLVED).read_text())
    checkpoint = load_checkpoint(ckpt_path)
    config = TrainConfig.from_dict(resolved["train"])
    if checkpoint["config_hash"] != config.hash() or resolved["config_hash"] != config.hash():
        raise ValidationError(f"config hash mismatch: checkpoint {checkpoint['config_hash']}, "
                              f"resolved config {config.hash()}; the checkpoint was not produced by this config")
    spec = data_spec(args) or resolved["data"]
    dataset, truth = load_from_spec(spec)
    splits = prepare_splits(dataset, config)
    if checkpoint["data_hash"] is not None and splits.fingerprint() != checkpoint["data_hash"]:
        raise ValidationError(f"data hash mismatch: checkpoint trained on {checkpoint['data_hash']}, "
                              f"current data gives {splits.fingerprint()}")
    model, _ = model_from_checkpoint(checkpoint, dataset.q_matrix)
    model.eval()
    report = evaluate_split(model, splits.test, "test", config, checkpoint["epoch"])
    diagnosed = model.f2.mastery().numpy()
    if truth is not None and diagnosed.shape == truth.shape:
        report.recovery = mastery_recovery(diagnosed, truth)
    with (run / "reports.jsonl").open("a") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def parse_grid(text: str | None) -> tuple[str | None, list]:
    if not text:
        return None, [None]
    name, _, values = text.partition("=")
    name = name.strip().replace("-", "_")
    kinds = {"n": int, "clusters": int, "train_frac": float, "balance": float}
    if name not in kinds or not values:
        raise ValidationError(f"--grid expects one of {sorted(kinds)} as NAME=v1,v2,...; got {text!r}")
    return name, [kinds[name](v) for v in values.split(",")]


def summarize(rows: list[dict]) -> list[dict]:
    table = []
    keys = sorted({(r["param"], r["value"], r["strategy"]) for r in rows},
                  key=lambda k: (str(k[0]), -1 if k[1] is None else k[1], STRATEGIES.index(k[2])))
    for param, value, strategy in keys:
        group = [r for r in rows if (r["param"], r["value"], r["strategy"]) == (param, value, strategy)]
        entry = {"param": param or "", "value": "" if value is None else value, "strategy": strategy,
                 "runs": len(group)}
        for metric in ("auc", "acc", "rmse"):
            vals = np.array([r[metric] for r in group])
            entry[f"{metric}_median"] = float(np.median(vals))
            entry[f"{metric}_min"] = float(vals.min())
            entry[f"{metric}_max"] = float(vals.max())
        table.append(entry)
    return table


def cmd_ablate(args) -> int:
    spec = data_spec(args)
    dataset, _ = load_from_spec(spec)
    strategies = [s.strip() for s in args.strategies.split(",")]
    for s in strategies:
        if s not in STRATEGIES:
            raise ValidationError(f"unknown strategy {s!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    param, values = parse_grid(args.grid)
    out = prepare_out(args.out or output_root() / "ablate", args.force)
    base = resolve_train_config(args).to_dict()

    rows = []
    for value in values:
        for strategy in strategies:
            for seed in seeds:
                fields = dict(base, strategy=strategy, seed=seed)
                if param is not None:
                    fields[param] = value
                config = TrainConfig.from_dict(fields).validate()
                rep = train(config, dataset).test_report
                rows.append({"param": param, "value": value, "strategy": strategy, "seed": seed,
                             "auc": rep.auc, "acc": rep.acc, "rmse": rep.rmse, "config_hash": config.hash()})
                logger.info("%s=%s %s seed=%d auc=%.4f", param, value, strategy, seed, rep.auc)

    with (out / "runs.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    table = summarize(rows)
    with (out / "table.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    (out / RESOLVED).write_text(json.dumps({"version": __version__, "train": base, "data": spec,
                                            "strategies": strategies, "seeds": seeds, "grid": args.grid},
                                           indent=2, sort_keys=True) + "\n")
    print(f"{'param':>10} {'value':>6} {'strategy':>9} {'auc':>8} {'spread':>8} {'acc':>8} {'rmse':>8}")
    for t in table:
        print(f"{t['param']:>10} {str(t['value']):>6} {t['strategy']:>9} {t['auc_median']:8.4f} "
              f"{t['auc_max'] - t['auc_min']:8.4f} {t['acc_median']:8.4f} {t['rmse_median']:8.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmes", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset with ground truth")
    g.add_argument("--students", type=int, default=1000)
    g.add_argument("--exercises", type=int, default=300)
    g.add_argument("--concepts", type=int, default=20)
    g.add_argument("--logs", type=int, default=40)
    g.add_argument("--concepts-per-exercise", type=int, nargs=2, default=(1, 3), metavar=("LO", "HI"))
    g.add_argument("--temperature", type=float, default=0.15)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one configuration")
    add_data_args(t)
    add_train_args(t)
    t.add_argument("--config", type=Path, help="resolved_config.json of an earlier run to start from")
    t.add_argument("--out", type=Path)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run on its test split")
    e.add_argument("run", type=Path, help="run directory written by train")
    add_data_args(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare strategies across seeds")
    add_data_args(a)
    add_train_args(a)
    a.add_argument("--strategies", default=",".join(STRATEGIES))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--grid", help="sensitivity sweep, e.g. n=5,10,20 or clusters=0,20,50 or train_frac=0.5,1.0")
    a.add_argument("--out", type=Path)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CMESError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
