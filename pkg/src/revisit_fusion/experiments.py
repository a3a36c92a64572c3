"""Experiment harness: strategy x seed grids with CSV, JSON and table output.

Every run row embeds the experiment's config hash and seed, so any row can
be reproduced by rerunning its exact config in deterministic mode. Failed
runs are recorded and excluded from the aggregates.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .config import BandArms, ConfigError, ExperimentConfig, config_hash
from .data import DatasetManifest, load_manifest
from .fusion import CANONICAL_STRATEGY_ORDER, STRATEGY_LABELS, FusionStrategy
from .metrics import aggregate_runs
from .models import save_checkpoint
from .synthetic import generate_dataset
from .training import TrainConfig, train

RESULTS_CSV = "results.csv"
AGGREGATES_CSV = "aggregates.csv"
SUMMARY_JSON = "summary.json"
TABLE_TXT = "table.txt"


def set_determinism(enabled: bool) -> None:
    """Fixed reduction order and algorithms; slower but replayable."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


@dataclass
class RunRecord:
    strategy: str
    seed: int
    arm: str = ""
    status: str = "ok"
    value: float | None = None
    wall_time: float = 0.0
    error: str = ""


@dataclass
class AggregateRow:
    strategy: str
    label: str
    arm: str
    mean: float | None
    stderr: float | None
    n_seeds: int
    single_seed: bool
    n_failed: int


@dataclass
class ExperimentResult:
    config_hash: str
    metric: str
    records: list[RunRecord] = field(default_factory=list)
    aggregates: list[AggregateRow] = field(default_factory=list)
    table: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.records)


def resolve_dataset(
    config: ExperimentConfig, out_dir: Path
) -> tuple[DatasetManifest, Path]:
    if config.dataset.synthetic is not None:
        data_dir = out_dir / "dataset"
        manifest = generate_dataset(config.dataset.synthetic, data_dir)
        return manifest, data_dir / "manifest.json"
    path = Path(config.dataset.manifest)
    return load_manifest(path), path


def _compose_train_config(
    config: ExperimentConfig,
    strategy: FusionStrategy,
    seed: int,
    bands: tuple[str, ...] | None,
) -> TrainConfig:
    template = config.train if config.train is not None else TrainConfig()
    model = config.model
    if bands is not None and model.in_channels != len(bands):
        model = replace(model, in_channels=len(bands))
    return replace(template, model=model, strategy=strategy, seed=seed, bands=bands)


def _execute_run(
    config: ExperimentConfig,
    manifest_path: Path,
    strategy: FusionStrategy,
    seed: int,
    deterministic: bool,
    arm: str,
    bands: tuple[str, ...] | None,
    checkpoint_path: Path | None,
) -> RunRecord:
    record = RunRecord(strategy=strategy.value, seed=seed, arm=arm)
    start = time.time()
    try:
        set_determinism(deterministic)
        manifest = load_manifest(manifest_path)
        train_config = _compose_train_config(config, strategy, seed, bands)
        model, log = train(train_config, manifest)
        record.value = float(log.final_report.primary)
        if checkpoint_path is not None:
            checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                model, train_config.model, checkpoint_path, norm_spec=log.norm_spec
            )
    except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        traceback.print_exc()
    record.wall_time = time.time() - start
    return record


def _ordered_strategies(requested) -> list[FusionStrategy]:
    requested = set(requested)
    return [s for s in CANONICAL_STRATEGY_ORDER if s in requested]


def _metric_name(config: ExperimentConfig) -> str:
    return "iou" if config.model.head == "segmentation" else "mse"


def _format_value(metric: str, value: float) -> str:
    return f"{value:.3f}" if metric == "iou" else f"{value:.4f}"


def format_table(rows: list[AggregateRow], metric: str) -> str:
    header = f"{'Strategy':<34}{metric.upper() + ' (mean ± stderr)':<26}n"
    lines = [header, "-" * len(header)]
    for row in rows:
        label = f"[{row.arm}] {row.label}" if row.arm else row.label
        if row.mean is None:
            cell = "all runs failed"
        else:
            cell = (
                f"{_format_value(metric, row.mean)} ± "
                f"{_format_value(metric, row.stderr)}"
            )
            if row.single_seed:
                cell += " (n=1)"
        lines.append(f"{label:<34}{cell:<26}{row.n_seeds}")
    return "\n".join(lines)


def _aggregate(records: list[RunRecord], arm: str, strategy: FusionStrategy) -> AggregateRow:
    relevant = [
        r for r in records if r.arm == arm and r.strategy == strategy.value
    ]
    values = [r.value for r in relevant if r.status == "ok"]
    n_failed = sum(1 for r in relevant if r.status != "ok")
    if not values:
        return AggregateRow(
            strategy=strategy.value,
            label=STRATEGY_LABELS[strategy],
            arm=arm,
            mean=None,
            stderr=None,
            n_seeds=0,
            single_seed=False,
            n_failed=n_failed,
        )
    agg = aggregate_runs(values)
    return AggregateRow(
        strategy=strategy.value,
        label=STRATEGY_LABELS[strategy],
        arm=arm,
        mean=agg.mean,
        stderr=agg.stderr,
        n_seeds=agg.n_seeds,
        single_seed=agg.single_seed,
        n_failed=n_failed,
    )


def _run_grid(
    config: ExperimentConfig,
    manifest_path: Path,
    out_dir: Path,
    arms: list[tuple[str, tuple[str, ...] | None]],
    workers: int,
    deterministic: bool,
) -> list[RunRecord]:
    jobs = []
    for arm, bands in arms:
        for strategy in _ordered_strategies(config.strategies):
            for seed in config.seeds:
                name = f"{arm + '_' if arm else ''}{strategy.value}_seed{seed}.pt"
                ckpt = (
                    out_dir / "checkpoints" / name
                    if config.save_checkpoints
                    else None
                )
                jobs.append(
                    (config, manifest_path, strategy, seed, deterministic, arm, bands, ckpt)
                )
    if workers <= 1:
        return [_execute_run(*job) for job in jobs]
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
        futures = [pool.submit(_execute_run, *job) for job in jobs]
        return [f.result() for f in futures]


def _write_outputs(
    result: ExperimentResult, out_dir: Path
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / RESULTS_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config_hash", "arm", "strategy", "seed", "metric", "value", "status", "error", "wall_time_s"]
        )
        for r in result.records:
            writer.writerow(
                [
                    result.config_hash,
                    r.arm,
                    r.strategy,
                    r.seed,
                    result.metric,
                    "" if r.value is None else f"{r.value:.10f}",
                    r.status,
                    r.error,
                    f"{r.wall_time:.2f}",
                ]
            )
    with (out_dir / AGGREGATES_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config_hash", "arm", "strategy", "metric", "mean", "stderr", "n", "n_failed"]
        )
        for row in result.aggregates:
            writer.writerow(
                [
                    result.config_hash,
                    row.arm,
                    row.strategy,
                    result.metric,
                    "" if row.mean is None else f"{row.mean:.10f}",
                    "" if row.stderr is None else f"{row.stderr:.10f}",
                    row.n_seeds,
                    row.n_failed,
                ]
            )
    summary = {
        "config_hash": result.config_hash,
        "metric": result.metric,
        "warnings": result.warnings,
        "rows": [
            {
                "arm": row.arm,
                "strategy": row.strategy,
                "label": row.label,
                "mean": row.mean,
                "stderr": row.stderr,
                "n": row.n_seeds,
                "single_seed": row.single_seed,
                "n_failed": row.n_failed,
            }
            for row in result.aggregates
        ],
    }
    (out_dir / SUMMARY_JSON).write_text(json.dumps(summary, indent=2) + "\n")
    (out_dir / TABLE_TXT).write_text(result.table + "\n")


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path | str,
    workers: int = 1,
    deterministic: bool = True,
) -> ExperimentResult:
    """Train and evaluate every requested strategy x seed combination."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, manifest_path = resolve_dataset(config, out_dir)
    records = _run_grid(
        config, manifest_path, out_dir, [("", None)], workers, deterministic
    )
    result = ExperimentResult(
        config_hash=config_hash(config), metric=_metric_name(config), records=records
    )
    result.aggregates = [
        _aggregate(records, "", s) for s in _ordered_strategies(config.strategies)
    ]
    result.table = format_table(result.aggregates, result.metric)
    _write_outputs(result, out_dir)
    return result


def _default_band_arms(manifest: DatasetManifest) -> BandArms:
    from .data import load_stack

    stack = load_stack(manifest, manifest.entries[0], revisit_indices=[0])
    names = stack.band_names
    rgb = ("B2", "B3", "B4")
    if not set(rgb).issubset(names):
        rgb = names[: min(3, len(names))]
    return BandArms(rgb=rgb, multispectral=names)


def run_band_comparison(
    config: ExperimentConfig,
    out_dir: Path | str,
    workers: int = 1,
    deterministic: bool = True,
) -> ExperimentResult:
    """Run the RGB-only arm against the full multispectral arm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, manifest_path = resolve_dataset(config, out_dir)
    arms_spec = config.band_arms or _default_band_arms(manifest)
    warnings = []
    if tuple(arms_spec.rgb) == tuple(arms_spec.multispectral):
        warnings.append("band arms are identical: both runs use the same config")
    arms = [("rgb", tuple(arms_spec.rgb)), ("multispectral", tuple(arms_spec.multispectral))]
    records = _run_grid(config, manifest_path, out_dir, arms, workers, deterministic)
    result = ExperimentResult(
        config_hash=config_hash(config),
        metric=_metric_name(config),
        records=records,
        warnings=warnings,
    )
    for arm, _ in arms:
        result.aggregates.extend(
            _aggregate(records, arm, s) for s in _ordered_strategies(config.strategies)
        )
    result.table = format_table(result.aggregates, result.metric)
    _write_outputs(result, out_dir)
    for message in warnings:
        print(f"warning: {message}")
    return result
