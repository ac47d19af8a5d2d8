"""Experiment harness: train / sweep / rank / selftest subcommands.

Outputs land in the directory given by --out, falling back to the
ZAVIT_OUT environment variable, then to ./out.  Every report is
machine-readable (JSON or CSV) and each reporting path also renders a
PNG figure next to its data file.

Exit codes: 0 success, 1 test failure or partially failed sweep,
2 usage or validation problems.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .data import load_container
from .metrics import (
    ScoreTable,
    cd_grouping,
    friedman_test,
    nemenyi_cd,
    rank_models,
    regime_advantage,
)
from .model import ModelConfig, baseline_config
from .tensor import NumericError
from .train import (
    DEFAULT_SEEDS,
    TrainProtocol,
    config_id,
    run_protocol,
)

ENV_OUT = "ZAVIT_OUT"
GRID_NAMES = ("hparam-table3", "component-table4", "pooling-table5")

SUMMARY_HEADER = ["config_id", "dataset", "metric", "mean", "std", "n_seeds"]
SUMMARY_NOTE = "# std is the population standard deviation over seeds"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(ENV_OUT) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_dataset(path_str: str) -> Tuple[str, str, str]:
    """Accepts a directory holding train.zvds/test.zvds, or a single
    container file.  For files, a `_test` sibling is used as the test
    split when present; otherwise the same file doubles as both."""
    p = Path(path_str)
    if p.is_dir():
        train, test = p / "train.zvds", p / "test.zvds"
        for required in (train, test):
            if not required.exists():
                raise FileNotFoundError(f"dataset file not found: {required}")
        val = p / "val.zvds"
        if val.exists():
            load_container(val)  # validated; the protocol does not consume it
        return p.name, str(train), str(test)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    stem = p.stem
    if stem.endswith("_train"):
        ds_id = stem[: -len("_train")]
        sibling = p.with_name(ds_id + "_test" + p.suffix)
    elif stem == "train":
        ds_id = p.parent.name or "dataset"
        sibling = p.with_name("test" + p.suffix)
    else:
        ds_id = stem
        sibling = p.with_name(stem + "_test" + p.suffix)
    test = sibling if sibling.exists() else p
    return ds_id, str(p), str(test)


def _peek_container(path: str) -> Tuple[int, int]:
    """(class_count, channels) from the header without reading the pixels."""
    import struct

    with open(path, "rb") as fh:
        head = fh.read(20)
    if len(head) < 20 or head[:4] != b"ZVDS":
        raise ValueError(f"not a dataset container: {path}")
    _, _, _, _, channels, class_count, _ = struct.unpack_from("<IIHHBHB", head, 4)
    return class_count, channels


def _protocol_from_args(args, seed: int) -> TrainProtocol:
    kwargs = {}
    if getattr(args, "shots", None) is not None:
        kwargs["shots_per_class"] = args.shots
    if getattr(args, "batch", None) is not None:
        kwargs["batch_size"] = args.batch
    if getattr(args, "lr", None) is not None:
        kwargs["learning_rate"] = args.lr
    if getattr(args, "epochs", None) is not None:
        kwargs["epochs"] = args.epochs
    return TrainProtocol(seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from . import figures

    ds_id, train_path, test_path = _resolve_dataset(args.dataset)
    split_train = load_container(train_path)
    split_test = load_container(test_path)
    if args.config:
        config = ModelConfig.from_json(Path(args.config).read_text())
    else:
        config = baseline_config(split_train.class_count, split_train.channels)
    protocol = _protocol_from_args(args, args.seed)
    out = _out_dir(args)  # created only once the inputs are known-good

    record = run_protocol(split_train, split_test, config, protocol, ds_id)
    cid = config_id(config)
    run_path = out / f"run_{cid}_{ds_id}_{protocol.seed}.json"
    run_path.write_text(json.dumps(record.to_json_dict(), indent=2, sort_keys=True))
    fig_path = out / f"loss_{cid}_{ds_id}_{protocol.seed}.png"
    figures.save_loss_curve(
        record.epoch_losses, fig_path, title=f"{ds_id} / {cid} / seed {protocol.seed}"
    )
    name = record.primary_metric
    print(
        f"run {cid} {ds_id} seed {protocol.seed}: "
        f"test {name}={record.test_metrics[name]:.4f} "
        f"train {name}={record.train_metrics[name]:.4f} "
        f"({record.wall_seconds:.1f}s)"
    )
    print(f"wrote {run_path}")
    print(f"wrote {fig_path}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def build_grid(
    name: str, class_count: int, channels: int, input_size: int = 64
) -> List[Tuple[str, ModelConfig]]:
    """The named built-in variant lists over a dataset's class/channel shape."""
    base = baseline_config(class_count, channels, input_size=input_size)
    if name == "hparam-table3":
        rows = [
            ("Baseline", {}),
            ("PS=8", {"patch_size": 8}),
            ("PS=32", {"patch_size": 32}),
            ("H=4", {"heads": 4}),
            ("Deeper TU", {"unit_dims": (128, 128, 64)}),
            ("Wider TU", {"unit_dims": (256, 128)}),
            ("Wider MLP", {"mlp_dims": (256, 128)}),
            ("PS=8 + H=4", {"patch_size": 8, "heads": 4}),
            ("PS=32 + H=4", {"patch_size": 32, "heads": 4}),
            ("Deeper+Wider", {"unit_dims": (128, 128, 64), "mlp_dims": (256, 128)}),
            ("PS=8 + Wider TU", {"patch_size": 8, "unit_dims": (256, 128)}),
            ("Wider TU + H=4", {"unit_dims": (256, 128), "heads": 4}),
        ]
    elif name == "component-table4":
        rows = [
            ("Full ZACH-ViT", {}),
            ("+ Positional", {"use_positional": True}),
            ("- Adaptive Residuals", {"use_adaptive_residual": False}),
            ("Random Shuffle", {"shuffle_patches": True}),
            ("[CLS] token", {"pooling": "cls"}),
        ]
    elif name == "pooling-table5":
        rows = [
            ("GAP", {}),
            ("Attention Pooling", {"pooling": "attention"}),
            ("Global Max Pooling", {"pooling": "max"}),
            ("[CLS] Pooling", {"pooling": "cls"}),
        ]
    else:
        raise ValueError(f"unknown grid {name!r}; built-ins: {', '.join(GRID_NAMES)}")
    return [(label, replace(base, **overrides)) for label, overrides in rows]


_worker_splits: Dict[str, object] = {}


def _load_cached(path: str):
    split = _worker_splits.get(path)
    if split is None:
        split = load_container(path)
        _worker_splits[path] = split
    return split


def _run_cell(payload: dict) -> dict:
    """One (config, dataset, seed) cell; must stay importable for pickling."""
    try:
        config = ModelConfig.from_json(payload["config_json"])
        protocol = TrainProtocol.from_json_dict(payload["protocol"])
        record = run_protocol(
            _load_cached(payload["train_path"]),
            _load_cached(payload["test_path"]),
            config,
            protocol,
            payload["dataset_id"],
        )
        return {"key": payload["key"], "ok": True, "record": record.to_json_dict()}
    except Exception as exc:
        return {
            "key": payload["key"],
            "ok": False,
            "error": f"{type(exc).__name__}: {exc}",
        }


def _plan_cells(args, seeds) -> Tuple[List[dict], Dict[str, str], Dict[str, dict]]:
    cells: List[dict] = []
    labels: Dict[str, str] = {}
    snapshots: Dict[str, dict] = {}

    def add(ds_path: str, label: str, config: ModelConfig, cell_seeds, protocol_base):
        ds_id, train_path, test_path = _resolve_dataset(ds_path)
        cid = config_id(config)
        labels.setdefault(cid, label)
        snapshots.setdefault(cid, json.loads(config.to_json()))
        for seed in cell_seeds:
            cells.append(
                {
                    "key": (cid, ds_id, int(seed)),
                    "dataset_id": ds_id,
                    "train_path": train_path,
                    "test_path": test_path,
                    "config_json": config.to_json(),
                    "protocol": protocol_base.with_seed(int(seed)).to_json_dict(),
                }
            )

    protocol_base = _protocol_from_args(args, seeds[0])
    if args.grid:
        if not args.dataset:
            raise ValueError("--grid needs at least one --dataset")
        for ds_path in args.dataset:
            _, train_path, _ = _resolve_dataset(ds_path)
            class_count, channels = _peek_container(train_path)
            for label, config in build_grid(
                args.grid, class_count, channels, args.input_size
            ):
                add(ds_path, label, config, seeds, protocol_base)
    elif args.plan:
        raw = json.loads(Path(args.plan).read_text())
        entries = raw.get("entries")
        if not isinstance(entries, list) or not entries:
            raise ValueError("plan must contain a non-empty 'entries' list")
        for i, entry in enumerate(entries):
            if "dataset" not in entry or "config" not in entry:
                raise ValueError(f"plan entry {i} needs 'dataset' and 'config'")
            config = ModelConfig.from_json(json.dumps(entry["config"]))
            entry_seeds = entry.get("seeds", seeds)
            if not entry_seeds:
                raise ValueError(f"plan entry {i} has an empty seed list")
            add(
                entry["dataset"],
                entry.get("name", f"entry{i}"),
                config,
                entry_seeds,
                protocol_base,
            )
    else:
        raise ValueError("sweep needs --grid or --plan")
    cells.sort(key=lambda c: c["key"])
    return cells, labels, snapshots


def _aggregate(records: List[dict]) -> List[dict]:
    """Summary rows (mean, population std, count) from run-record dicts,
    grouped by (config, dataset), deterministically ordered."""
    groups: Dict[Tuple[str, str], List[dict]] = {}
    for rec in records:
        groups.setdefault((rec["config_id"], rec["dataset"]), []).append(rec)
    rows = []
    for (cid, ds) in sorted(groups):
        bunch = sorted(groups[(cid, ds)], key=lambda r: r["seed"])
        metric_names = sorted(bunch[0]["test_metrics"])
        for metric in metric_names:
            values = np.array([r["test_metrics"][metric] for r in bunch])
            rows.append(
                {
                    "config_id": cid,
                    "dataset": ds,
                    "metric": metric,
                    "mean": float(values.mean()),
                    "std": float(values.std()),
                    "n_seeds": len(values),
                }
            )
    return rows


def _write_summary_csv(rows: List[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_NOTE + "\n")
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r["config_id"],
                    r["dataset"],
                    r["metric"],
                    format(r["mean"], ".17g"),
                    format(r["std"], ".17g"),
                    r["n_seeds"],
                ]
            )


def cmd_sweep(args) -> int:
    from . import figures

    seeds = [int(s) for s in (args.seeds or DEFAULT_SEEDS)]
    if not seeds:
        raise ValueError("seed list must not be empty")
    cells, labels, snapshots = _plan_cells(args, seeds)
    out = _out_dir(args)

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_cell, cells, chunksize=1))
    else:
        results = [_run_cell(c) for c in cells]
    results.sort(key=lambda r: r["key"])

    records, failures = [], []
    for res in results:
        if res["ok"]:
            rec = res["record"]
            records.append(rec)
            run_path = out / f"run_{rec['config_id']}_{rec['dataset']}_{rec['seed']}.json"
            run_path.write_text(json.dumps(rec, indent=2, sort_keys=True))
        else:
            failures.append({"cell": list(res["key"]), "error": res["error"]})

    rows = _aggregate(records)
    summary_path = out / "sweep_summary.csv"
    _write_summary_csv(rows, summary_path)
    configs_path = out / "sweep_configs.json"
    configs_path.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "source": args.grid or args.plan,
                "seeds": seeds,
                "labels": labels,
                "configs": snapshots,
            },
            indent=2,
            sort_keys=True,
        )
    )
    primary = {
        rec["dataset"]: rec["primary_metric"] for rec in records
    }
    chart_rows = [r for r in rows if r["metric"] == primary.get(r["dataset"])]
    if chart_rows:
        figures.save_summary_chart(
            chart_rows, labels, out / "sweep_summary.png", ylabel="primary metric"
        )
    print(f"{len(records)} cells ok, {len(failures)} failed")
    print(f"wrote {summary_path}")
    if failures:
        failures_path = out / "sweep_failures.json"
        failures_path.write_text(json.dumps(failures, indent=2))
        print(f"wrote {failures_path}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# rank


def _read_score_table(path: str) -> ScoreTable:
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        table = [row for row in reader if row]
    if not table or len(table[0]) < 2 or table[0][0].strip().lower() != "model":
        raise ValueError("score table must start with a 'model,<dataset>...' header")
    datasets = [c.strip() for c in table[0][1:]]
    models, scores, missing = [], [], []
    for row in table[1:]:
        model = row[0].strip()
        models.append(model)
        padded = row[1:] + [""] * (len(datasets) - len(row) + 1)
        values = []
        for ds, cell in zip(datasets, padded):
            cell = cell.strip()
            if not cell:
                missing.append(f"({model}, {ds})")
                values.append(np.nan)
                continue
            try:
                values.append(float(cell))
            except ValueError:
                missing.append(f"({model}, {ds}: {cell!r})")
                values.append(np.nan)
        scores.append(values)
    if missing:
        raise ValueError("incomplete score table, missing cells: " + ", ".join(missing))
    return ScoreTable(models, datasets, np.array(scores))


def cmd_rank(args) -> int:
    from . import figures

    table = _read_score_table(args.table)
    ranks, mean_ranks = rank_models(table)
    k, n = table.scores.shape
    stat, p = friedman_test(ranks)
    cd = nemenyi_cd(k, n, args.alpha)
    groups = cd_grouping(mean_ranks, cd)
    if args.advantage_subject and not args.advantage_baselines:
        raise ValueError("--advantage-subject needs --advantage-baselines")
    out = _out_dir(args)

    report = {
        "schema_version": 1,
        "alpha": args.alpha,
        "models": table.model_names,
        "datasets": table.dataset_names,
        "ranks": ranks.tolist(),
        "mean_ranks": mean_ranks.tolist(),
        "friedman": {"statistic": stat, "p_value": p},
        "cd": cd,
        "groups": groups,
        "groups_named": [[table.model_names[i] for i in g] for g in groups],
    }
    if args.advantage_subject:
        report["advantage"] = {
            "subject": args.advantage_subject,
            "baselines": list(args.advantage_baselines),
            "per_dataset": {
                ds: regime_advantage(
                    table, args.advantage_subject, args.advantage_baselines, ds
                )
                for ds in table.dataset_names
            },
        }

    report_path = out / "rank_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))

    plot_path = out / "rank_plot_data.csv"
    with open(plot_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "label", "start", "end"])
        for i in sorted(range(k), key=lambda i: mean_ranks[i]):
            writer.writerow(
                ["model", table.model_names[i]]
                + [format(mean_ranks[i], ".17g")] * 2
            )
        for g_i, group in enumerate(groups):
            lo = min(mean_ranks[i] for i in group)
            hi = max(mean_ranks[i] for i in group)
            writer.writerow(
                [
                    "group",
                    "|".join(table.model_names[i] for i in group),
                    format(lo, ".17g"),
                    format(hi, ".17g"),
                ]
            )

    figures.save_mean_rank_chart(table.model_names, mean_ranks, out / "rank_mean.png")
    figures.save_cd_diagram(
        table.model_names, mean_ranks, cd, groups, out / "rank_cd.png", args.alpha
    )
    print(
        f"k={k} N={n} Friedman chi2={stat:.4f} p={p:.4g} CD({args.alpha})={cd:.4f}"
    )
    print(f"wrote {report_path}")
    print(f"wrote {plot_path}")
    return 0


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    if args.file:
        split = load_container(args.file)
        n, h, w, c = split.images.shape
        print(
            f"{args.file}: n={n} H={h} W={w} C={c} "
            f"classes={split.class_count} task={split.task_kind}"
        )
        return 0
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zachvit",
        description="Permutation-invariant compact ViT: training, sweeps, rank statistics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_protocol_flags(p):
        p.add_argument("--shots", type=int, help="shots per class (default 50)")
        p.add_argument("--batch", type=int, help="batch size (default 16)")
        p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
        p.add_argument("--epochs", type=int, help="training epochs (default 23)")

    def add_out_flag(p):
        p.add_argument(
            "--out", help=f"output directory (default ${ENV_OUT} or ./out)"
        )

    p_train = sub.add_parser("train", help="one protocol run on one dataset")
    p_train.add_argument("--dataset", required=True, help="container file or directory")
    p_train.add_argument("--config", help="model config JSON file (default: baseline)")
    p_train.add_argument("--seed", type=int, default=3)
    add_protocol_flags(p_train)
    add_out_flag(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a variant grid or a plan file")
    p_sweep.add_argument("--grid", choices=GRID_NAMES, help="built-in variant list")
    p_sweep.add_argument("--plan", help="experiment plan JSON file")
    p_sweep.add_argument(
        "--dataset", action="append", help="dataset for --grid (repeatable)"
    )
    p_sweep.add_argument(
        "--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS), help="seed list"
    )
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument(
        "--input-size", type=int, default=64, help="model input resolution for grids"
    )
    add_protocol_flags(p_sweep)
    add_out_flag(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_rank = sub.add_parser("rank", help="rank a model x dataset score table")
    p_rank.add_argument("--table", required=True, help="CSV: model,<dataset>,...")
    p_rank.add_argument("--alpha", type=float, default=0.05, choices=[0.05, 0.1])
    p_rank.add_argument("--advantage-subject", help="model for advantage report")
    p_rank.add_argument(
        "--advantage-baselines", nargs="+", help="baseline models for advantage"
    )
    add_out_flag(p_rank)
    p_rank.set_defaults(func=cmd_rank)

    p_self = sub.add_parser("selftest", help="run the built-in invariant suites")
    p_self.add_argument("--file", help="validate a dataset container and exit")
    add_out_flag(p_self)
    p_self.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed its message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
