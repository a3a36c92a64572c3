"""Command-line front end.

Verbs: generate-data, run, compare-bands, negative-eval, gradient-check.
Experiment configs are single strict-keyed JSON files; results land in the
--out directory as results.csv / aggregates.csv / summary.json / table.txt.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (
    ConfigError,
    dataclass_from_dict,
    load_experiment_config,
)
from .data import DatasetError, load_manifest
from .fusion import FusionStrategy
from .gradcheck import GradCheckResult, gradient_check
from .models import ModelConfig, build_model, load_checkpoint
from .synthetic import SyntheticParams, generate_dataset
from .training import negative_image_report
from . import experiments


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--seeds", default=None, help="comma-separated seed override, e.g. 0,1,2"
    )
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="single-threaded deterministic math (replayable, slower)",
    )
    parser.add_argument("--workers", type=int, default=1, help="parallel run workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revisit-fusion",
        description="Multi-revisit fusion experiments for satellite imagery models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset to disk")
    p.add_argument("--config", required=True, help="SyntheticParams JSON file")
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("run", help="train/evaluate each strategy x seed")
    _add_common(p)

    p = sub.add_parser("compare-bands", help="RGB-only vs multispectral arms")
    _add_common(p)

    p = sub.add_parser("negative-eval", help="false-positive report on negatives")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", default=FusionStrategy.LATENT_TEMPORAL_MAX.value,
                   choices=[s.value for s in FusionStrategy])
    p.add_argument("--t-revisits", type=int, default=4)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--out", default=None, help="optional JSON report path")

    p = sub.add_parser("gradient-check", help="finite-difference gradient audit")
    p.add_argument("--family", default="all", choices=["all", "unet", "swin", "vit"])
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--t-revisits", type=int, default=3)
    p.add_argument("--n-params", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _parse_seeds(raw: str | None) -> tuple[int, ...] | None:
    if raw is None:
        return None
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"invalid --seeds value {raw!r}") from exc


def cmd_generate_data(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    params = dataclass_from_dict(SyntheticParams, doc, path="params")
    manifest = generate_dataset(params, args.out)
    n_train = len(manifest.split_entries("train"))
    n_test = len(manifest.split_entries("test"))
    n_neg = len(manifest.negatives())
    print(
        f"wrote {len(manifest.entries)} locations to {args.out} "
        f"({n_train} train / {n_test} test, {n_neg} negative, "
        f"T={params.n_revisits}, {params.n_bands} bands, "
        f"{params.height}x{params.width})"
    )
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return 0


def _load_run_config(args):
    config = load_experiment_config(args.config)
    seeds = _parse_seeds(args.seeds)
    if seeds:
        from dataclasses import replace

        config = replace(config, seeds=seeds)
    return config


def cmd_run(args) -> int:
    config = _load_run_config(args)
    result = experiments.run_experiment(
        config, args.out, workers=args.workers, deterministic=args.deterministic
    )
    print(result.table)
    print(f"config hash: {result.config_hash}")
    return 0 if result.all_ok else 1


def cmd_compare_bands(args) -> int:
    config = _load_run_config(args)
    result = experiments.run_band_comparison(
        config, args.out, workers=args.workers, deterministic=args.deterministic
    )
    print(result.table)
    print(f"config hash: {result.config_hash}")
    return 0 if result.all_ok else 1


def cmd_negative_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    stats = negative_image_report(
        bundle.model,
        manifest,
        strategy=FusionStrategy(args.strategy),
        norm_spec=bundle.norm_spec,
        t_revisits=args.t_revisits,
        split=split,
    )
    print(
        f"{stats.flagged_fraction * 100:.1f}% of negative images flagged "
        f"({stats.n_images} negatives evaluated)"
    )
    print("positive-pixel counts per flagged image:")
    for bucket, count in stats.buckets.items():
        print(f"  {bucket:>6} px: {count}")
    if args.out:
        Path(args.out).write_text(json.dumps(stats.as_dict(), indent=2) + "\n")
        print(f"report: {args.out}")
    return 0


_GRADCHECK_MODELS = {
    "unet": (
        ModelConfig(
            family="unet", in_channels=2, encoder_size="small",
            base_widths=(8, 16, 32, 64),
        ),
        32,
    ),
    "swin": (
        ModelConfig(
            family="swin", in_channels=2, embed_dim=16,
            depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8), window_size=4,
        ),
        32,
    ),
    "vit": (
        ModelConfig(
            family="vit", in_channels=2, embed_dim=32, depth=2, num_heads=2,
            patch_size=16, img_size=16,
        ),
        16,
    ),
}


def run_family_gradcheck(
    family: str, t_revisits: int, tolerance: float, n_params: int, seed: int
) -> GradCheckResult:
    config, size = _GRADCHECK_MODELS[family]
    model = build_model(config, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    stack = torch.rand(
        (1, t_revisits, config.in_channels, size, size),
        generator=gen, dtype=torch.float64,
    )
    target = (
        torch.rand((1, 1, size, size), generator=gen, dtype=torch.float64) > 0.5
    ).double()
    return gradient_check(
        model, stack, target, tolerance=tolerance, n_params=n_params, seed=seed
    )


def cmd_gradient_check(args) -> int:
    families = list(_GRADCHECK_MODELS) if args.family == "all" else [args.family]
    all_passed = True
    for family in families:
        result = run_family_gradcheck(
            family, args.t_revisits, args.tolerance, args.n_params, args.seed
        )
        status = "PASS" if result.passed else "FAIL"
        print(
            f"{family:>5}: {status}  max relative error "
            f"{result.max_rel_error:.3e} over {result.n_checked} parameters "
            f"(tolerance {result.tolerance:g})"
        )
        all_passed &= result.passed
    return 0 if all_passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "generate-data": cmd_generate_data,
        "run": cmd_run,
        "compare-bands": cmd_compare_bands,
        "negative-eval": cmd_negative_eval,
        "gradient-check": cmd_gradient_check,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
