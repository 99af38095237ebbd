"""
Command-Line Surface
Subcommands: generate, train, sweep, analyze. Library errors are mapped to
exit codes here: 0 success, 1 configuration, 2 numerical, 3 audit failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.config_loader import ConfigLoader, resolve_seed
from src.errors import AuditFailure, ConfSMoEError
from src.experiment_models import ConflictReport
from src.jacobian_analysis import (
    conflict_sweep, load_balance_grad, load_balance_grad_check, moe_jacobian_batch,
    negativity_rate, psd_audit
)
from src.synthdata import apply_protocol, generate, modality_gap, save_dataset
from src.training.sweep_orchestrator import SweepOrchestrator, SweepSpec
from src.training.trainer import run_experiment


logger = logging.getLogger(__name__)

DEFAULT_SEED = 2023
PSD_TOLERANCE = -1e-10
NEGATIVITY_THRESHOLD = 0.95
GRAD_CHECK_TOLERANCE = 1e-5
UNIFORM_GRAD_TOLERANCE = 1e-10


def cmd_generate(args) -> int:
    loader = ConfigLoader(args.config)
    config = loader.experiment_config(seed_override=args.seed, seed_target="synth")
    out = Path(args.out or config.dataset_dir or Path(config.output_dir) / "dataset")

    print("=" * 70)
    print("GENERATING SYNTHETIC DATASET")
    print("=" * 70)

    seed = config.synth.seed
    for split in ("train", "test"):
        dataset = apply_protocol(generate(config.synth, split), config.protocol, split, seed)
        save_dataset(dataset, str(out / split))
        rates = ", ".join(f"{name}={rate:.3f}" for name, rate in zip(config.synth.names(), dataset.missing_rates()))
        print(f"✓ {split}: {len(dataset)} instances | missing rates {rates} | "
              f"modality gap {modality_gap(dataset):.4f}")

    print(f"\n✓ Dataset written to: {out}")
    return 0


def cmd_train(args) -> int:
    loader = ConfigLoader(args.config)
    config = loader.experiment_config(seed_override=args.seed, seed_target="model")
    run_dir = args.out or config.output_dir

    print("=" * 70)
    print(f"TRAINING gate={config.model.gate.value} variant={config.model.variant.value} "
          f"impute={config.model.impute.value} seed={config.model.seed}")
    print("=" * 70)

    result = run_experiment(config, run_dir=run_dir, verbose=True, dump_attention=args.dump_attention)
    summary = result.summary()

    print("\n" + "=" * 70)
    print("RUN SUMMARY")
    print("=" * 70)
    print(f"Final F1 (macro): {summary['final_f1']:.4f}")
    print(f"Final AUC:        {summary['final_auc']:.4f}")
    print(f"Usage entropy:    {summary['final_usage_entropy']:.4f}")
    print(f"Oscillation:      {summary['oscillation']:.4f}")
    print(f"Run directory:    {run_dir}")
    print("=" * 70)
    return 0


def cmd_sweep(args) -> int:
    loader = ConfigLoader(args.config)
    spec = SweepSpec.from_dict(loader.config)
    if args.seed is not None:
        spec.seeds = [resolve_seed(args.seed, None)]
    SweepOrchestrator(spec, jobs=args.jobs, output_dir=args.out).run()
    return 0


def _audit_line(name: str, value: float, passed: bool, detail: str) -> bool:
    status = "PASS" if passed else "FAIL"
    print(f"{'✓' if passed else '✗'} {name}: {value:.3e} ({detail}): {status}")
    return passed


def cmd_analyze(args) -> int:
    seed = resolve_seed(args.seed, None)
    seed = DEFAULT_SEED if seed is None else seed
    out = Path(args.out or "runs/analysis")
    out.mkdir(parents=True, exist_ok=True)

    print("=" * 70)
    print("ROUTING THEORY AUDITS")
    print("=" * 70)
    results = []

    print(f"\n[Step 1/4] PSD audit over {args.samples} Dirichlet(1) samples...")
    smallest = psd_audit(args.samples, seed=seed)
    results.append(_audit_line("PSD min eigenvalue", smallest, smallest >= PSD_TOLERANCE,
                               f">= {PSD_TOLERANCE:g}"))

    print(f"\n[Step 2/4] Gradient conflict over {args.sharp} sharp distributions (N={args.n_experts})...")
    reports: List[ConflictReport] = conflict_sweep(args.sharp, args.n_experts, seed=seed)
    pd.DataFrame([r.to_dict() for r in reports], columns=["step", "g_max", "conflict_score", "entropy"]).to_csv(
        out / "conflict.csv", index=False, float_format="%.17g")
    rate = negativity_rate(reports)
    results.append(_audit_line("Conflict negativity rate", rate, rate >= NEGATIVITY_THRESHOLD,
                               f">= {NEGATIVITY_THRESHOLD}"))
    uniform_norm = float(np.linalg.norm(load_balance_grad(np.full(args.n_experts, 1.0 / args.n_experts))))
    results.append(_audit_line("Load gradient norm at uniform", uniform_norm,
                               uniform_norm <= UNIFORM_GRAD_TOLERANCE, f"<= {UNIFORM_GRAD_TOLERANCE:g}"))

    print(f"\n[Step 3/4] Load-balance gradient check over {args.grad_check} samples...")
    lb_error = load_balance_grad_check(args.grad_check, seed=seed)
    results.append(_audit_line("Load-balance grad max rel error", lb_error,
                               lb_error <= GRAD_CHECK_TOLERANCE, f"<= {GRAD_CHECK_TOLERANCE:g}"))

    print(f"\n[Step 4/4] MoE Jacobian check over {args.grad_check} instances...")
    jacobian_error = moe_jacobian_batch(args.grad_check, seed=seed)
    results.append(_audit_line("MoE Jacobian max rel error", jacobian_error,
                               jacobian_error <= GRAD_CHECK_TOLERANCE, f"<= {GRAD_CHECK_TOLERANCE:g}"))

    print("\n" + "=" * 70)
    print(f"{sum(results)}/{len(results)} audits passed | conflict.csv written to: {out}")
    print("=" * 70)
    if not all(results):
        raise AuditFailure(f"{len(results) - sum(results)} audit(s) missed their threshold")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed (overrides config and CONFMOE_SEED)")
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")

    parser = argparse.ArgumentParser(prog="confsmoe", description="Confidence-guided sparse MoE lab")
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate_parser = subparsers.add_parser("generate", parents=[common], help="Write a synthetic dataset")
    generate_parser.add_argument("--config", default="config/config.yaml")
    generate_parser.set_defaults(handler=cmd_generate)

    train_parser = subparsers.add_parser("train", parents=[common], help="Run one training job")
    train_parser.add_argument("--config", default="config/config.yaml")
    train_parser.add_argument("--dump-attention", action="store_true",
                              help="Write attention.csv for the first test batch")
    train_parser.set_defaults(handler=cmd_train)

    sweep_parser = subparsers.add_parser("sweep", parents=[common], help="Run an ablation sweep")
    sweep_parser.add_argument("--config", default="config/sweep.yaml")
    sweep_parser.add_argument("--jobs", type=int, default=1, help="Concurrent runs")
    sweep_parser.set_defaults(handler=cmd_sweep)

    analyze_parser = subparsers.add_parser("analyze", parents=[common], help="Run the routing theory audits")
    analyze_parser.add_argument("--samples", type=int, default=1000, help="PSD audit samples")
    analyze_parser.add_argument("--sharp", type=int, default=1000, help="Sharp distributions for the conflict sweep")
    analyze_parser.add_argument("--n-experts", type=int, default=8)
    analyze_parser.add_argument("--grad-check", type=int, default=50, help="Gradient-check instances")
    analyze_parser.set_defaults(handler=cmd_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.handler(args)
    except ConfSMoEError as e:
        print(f"\n✗ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"\n✗ Error: {e}", file=sys.stderr)
        return 1
