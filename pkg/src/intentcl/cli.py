"""Config-driven experiment runner, results inspection and figures.

Commands:
  run     --config cfg.json [--out dir] [--override k.path=value ...]
  plot    --kind trend|ablation RESULTS... --out dir
  inspect RESULTS

A run expands the configured grid (strategies x distillation configs x
memory sizes x seed pairs), trains one cell per combination into its own
subdirectory, and aggregates a summary table. Figures are rebuilt purely
from the persisted CSV/JSON files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import jsonschema

from .distill import KDConfig
from .frontend import FrontendConfig, load_corpus
from .model import TCNConfig
from .scenario import Scenario, build_cil_scenario, synthetic_scenario
from .trainer import STRATEGIES, TrainConfig, run_experiment

__all__ = ["CONFIG_SCHEMA", "CliError", "load_config", "cmd_run", "cmd_plot", "cmd_inspect", "main"]

FSC_TASK_SIZES = [4] + [3] * 9

SUMMARY_COLUMNS = (
    "strategy", "feat_kd_scope", "pred_kd_scope", "memory", "seed", "last_acc", "avg_acc",
)

_KD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "feature_scope": {"enum": ["none", "R", "DR"]},
        "pred_scope": {"enum": ["none", "R", "DR"]},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "dataset", "grid"],
    "properties": {
        "schema_version": {"const": 1},
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "synthetic"},
                        "n_tasks": {"type": "integer", "minimum": 1},
                        "classes_per_task": {"type": "integer", "minimum": 1},
                        "samples_per_class": {"type": "integer", "minimum": 1},
                        "feat_dim": {"type": "integer", "minimum": 1},
                        "n_frames": {"type": "integer", "minimum": 1},
                        "cluster_std": {"type": "number", "minimum": 0},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "data_dir", "cache_dir"],
                    "properties": {
                        "kind": {"const": "fsc"},
                        "data_dir": {"type": "string"},
                        "cache_dir": {"type": "string"},
                        "task_sizes": {
                            "type": "array",
                            "items": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            ]
        },
        "order_seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "train_seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input_channels": {"type": "integer", "minimum": 1},
                "hidden_channels": {"type": "integer", "minimum": 1},
                "bottleneck_channels": {"type": "integer", "minimum": 1},
                "blocks_per_repeat": {"type": "integer", "minimum": 1},
                "repeats": {"type": "integer", "minimum": 1},
                "depthwise_kernel": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs_per_task": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "gem_margin": {"type": "number", "minimum": 0},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["strategies", "kd", "memory_sizes"],
            "properties": {
                "strategies": {
                    "type": "array",
                    "items": {"enum": list(STRATEGIES)},
                    "minItems": 1,
                },
                "kd": {"type": "array", "items": _KD_SCHEMA, "minItems": 1},
                "memory_sizes": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 1,
                },
            },
        },
        "save_checkpoints": {"type": "boolean"},
    },
}

SYNTHETIC_DEFAULTS = {
    "n_tasks": 5,
    "classes_per_task": 2,
    "samples_per_class": 100,
    "feat_dim": 8,
    "n_frames": 20,
    "cluster_std": 0.3,
}


class CliError(Exception):
    """User-facing failure: bad config, missing results, empty inputs."""


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise CliError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_override(config: dict, path: list[str], value) -> None:
    node = config
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise CliError(f"override path {'.'.join(path)} crosses a non-object value")
    node[path[-1]] = value


def load_config(path: str | Path, overrides: list[str] | None = None) -> dict:
    """Read, override, and schema-validate an experiment config."""
    path = Path(path)
    if not path.exists():
        raise CliError(f"config not found: {path}")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from exc
    applied = []
    for text in overrides or []:
        key_path, value = _parse_override(text)
        _apply_override(config, key_path, value)
        applied.append(text)
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"config invalid at {where}: {exc.message}") from exc
    config["_overrides"] = applied
    return config


def _build_scenario(dataset: dict, order_seed: int) -> Scenario:
    if dataset["kind"] == "synthetic":
        params = {**SYNTHETIC_DEFAULTS, **{k: v for k, v in dataset.items() if k != "kind"}}
        return synthetic_scenario(seed=order_seed, **params)
    samples, split_of, _ = load_corpus(
        dataset["data_dir"], dataset["cache_dir"], FrontendConfig()
    )
    task_sizes = dataset.get("task_sizes", FSC_TASK_SIZES)
    return build_cil_scenario(samples, task_sizes, order_seed, split_of)


def _cell_name(strategy: str, kd: dict, memory: int, order_seed: int, train_seed: int) -> str:
    feat = kd.get("feature_scope", "none")
    pred = kd.get("pred_scope", "none")
    return f"{strategy}__feat-{feat}__pred-{pred}__mem-{memory}__o{order_seed}-t{train_seed}"


def _grid_cells(config: dict):
    grid = config["grid"]
    seen = set()
    for strategy in grid["strategies"]:
        for kd in grid["kd"]:
            for memory in grid["memory_sizes"]:
                if strategy == "finetune":
                    memory = 0  # no rehearsal store; collapse the memory axis
                for order_seed in config.get("order_seeds", [0]):
                    for train_seed in config.get("train_seeds", [0]):
                        name = _cell_name(strategy, kd, memory, order_seed, train_seed)
                        if name in seen:
                            continue
                        seen.add(name)
                        yield name, strategy, kd, memory, order_seed, train_seed


def cmd_run(config_path: str | Path, out_dir: str | Path, overrides: list[str] | None = None) -> Path:
    """Run every grid cell and write per-cell results plus summary.csv."""
    config = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = copy.deepcopy(config)
    echo["overrides"] = echo.pop("_overrides")
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))

    model_cfg = TCNConfig(**config.get("model", {}))
    scenarios: dict[int, Scenario] = {}
    summary_rows = []
    for name, strategy, kd, memory, order_seed, train_seed in _grid_cells(config):
        if order_seed not in scenarios:
            scenarios[order_seed] = _build_scenario(config["dataset"], order_seed)
        scenario = scenarios[order_seed]
        cfg = TrainConfig(
            seed=train_seed,
            strategy=strategy,
            kd=KDConfig(**kd),
            memory_capacity=memory,
            **config.get("train", {}),
        )
        print(f"[run] {name}", flush=True)
        result = run_experiment(
            scenario, cfg, model_cfg, save_checkpoints=config.get("save_checkpoints", True)
        )
        result.config["cell"] = name
        result.save(out / "cells" / name)
        summary_rows.append(
            {
                "strategy": strategy,
                "feat_kd_scope": kd.get("feature_scope", "none"),
                "pred_kd_scope": kd.get("pred_scope", "none"),
                "memory": memory,
                "seed": f"{order_seed}-{train_seed}",
                "last_acc": f"{result.last_acc:.6f}",
                "avg_acc": f"{result.avg_acc:.6f}",
            }
        )

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summary_rows)
    print(_summary_table(summary_rows))
    return out


def _read_summaries(results_dirs) -> list[dict]:
    rows = []
    for d in results_dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            raise CliError(f"no summary.csv under {d}")
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    if not rows:
        raise CliError("summary files contain no runs")
    return rows


def _summary_table(rows: list[dict]) -> str:
    """Mean accuracies over seeds, one line per configuration."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["strategy"], row["feat_kd_scope"], row["pred_kd_scope"], row["memory"])
        groups.setdefault(key, []).append(row)
    lines = [
        f"{'strategy':<18} {'feat_kd':<8} {'pred_kd':<8} {'memory':<7} "
        f"{'runs':<5} {'last_acc':<9} {'avg_acc':<9}"
    ]
    for key in sorted(groups):
        members = groups[key]
        last = sum(float(r["last_acc"]) for r in members) / len(members)
        avg = sum(float(r["avg_acc"]) for r in members) / len(members)
        lines.append(
            f"{key[0]:<18} {key[1]:<8} {key[2]:<8} {key[3]:<7} "
            f"{len(members):<5} {last:<9.3f} {avg:<9.3f}"
        )
    return "\n".join(lines)


def cmd_inspect(results_dir: str | Path) -> str:
    table = _summary_table(_read_summaries([results_dir]))
    print(table)
    return table


def _find_eval_logs(results_dirs) -> list[tuple[str, Path]]:
    found = []
    for d in results_dirs:
        d = Path(d)
        candidates = [d] + sorted(p for p in d.glob("cells/*") if p.is_dir())
        for run_dir in candidates:
            log_path = run_dir / "eval_log.csv"
            if log_path.exists():
                label = run_dir.name
                cfg_path = run_dir / "config.json"
                if cfg_path.exists():
                    cfg = json.loads(cfg_path.read_text())
                    label = cfg.get("cell", label)
                found.append((label, log_path))
    if not found:
        raise CliError(f"no eval_log.csv found under {', '.join(str(d) for d in results_dirs)}")
    return found


def cmd_plot(results_dirs, kind: str, out_dir: str | Path) -> Path:
    """Render a figure from persisted logs; returns the image path."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "trend":
        runs = _find_eval_logs(results_dirs)
        fig, ax = plt.subplots(figsize=(8, 5))
        for label, log_path in runs:
            with open(log_path, newline="") as fh:
                accs = [float(row["accuracy"]) for row in csv.DictReader(fh)]
            if not accs:
                raise CliError(f"{log_path} has no epochs")
            ax.plot(range(1, len(accs) + 1), accs, label=label)
        ax.set_xlabel("training step (epochs, tasks concatenated)")
        ax.set_ylabel("accuracy on seen test data")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        target = out / "trend.png"
    elif kind == "ablation":
        rows = _read_summaries(results_dirs)
        groups: dict[tuple, dict[int, list[float]]] = {}
        for row in rows:
            cfg_key = (row["strategy"], row["feat_kd_scope"], row["pred_kd_scope"])
            by_mem = groups.setdefault(cfg_key, {})
            by_mem.setdefault(int(row["memory"]), []).append(float(row["avg_acc"]))
        memories = sorted({m for by_mem in groups.values() for m in by_mem})
        fig, ax = plt.subplots(figsize=(8, 5))
        width = 0.8 / max(1, len(groups))
        for i, (cfg_key, by_mem) in enumerate(sorted(groups.items())):
            xs, ys = [], []
            for j, memory in enumerate(memories):
                if memory in by_mem:
                    xs.append(j + i * width)
                    ys.append(sum(by_mem[memory]) / len(by_mem[memory]))
            ax.bar(xs, ys, width=width, label="/".join(cfg_key))
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(memories))])
        ax.set_xticklabels([str(m) for m in memories])
        ax.set_xlabel("rehearsal memory size")
        ax.set_ylabel("avg accuracy")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        target = out / "ablation.png"
    else:
        raise CliError(f"unknown plot kind {kind!r}")
    fig.tight_layout()
    fig.savefig(target, dpi=150)
    plt.close(fig)
    return target


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="intentcl", description="class-incremental intent learning experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment grid from a config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="results")
    p_run.add_argument("--override", action="append", default=[], metavar="K.PATH=V")

    p_plot = sub.add_parser("plot", help="render figures from results")
    p_plot.add_argument("--kind", choices=["trend", "ablation"], required=True)
    p_plot.add_argument("results", nargs="+")
    p_plot.add_argument("--out", default="figures")

    p_inspect = sub.add_parser("inspect", help="print the summary table")
    p_inspect.add_argument("results")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cmd_run(args.config, args.out, args.override)
        elif args.command == "plot":
            path = cmd_plot(args.results, args.kind, args.out)
            print(path)
        elif args.command == "inspect":
            cmd_inspect(args.results)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
