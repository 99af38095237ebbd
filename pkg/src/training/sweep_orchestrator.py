"""
Sweep Orchestrator
Expands a sweep document (gates x variants x impute modes x seeds, optionally
x missing rates x asymmetric test subsets) into runs, executes them in a
bounded worker pool and merges the per-run results into summary.csv.
"""

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from src.errors import ConfigurationError
from src.experiment_models import (
    ExperimentConfig, GateKind, ImputeMode, Protocol, ProtocolKind, Variant, _parse_enum
)
from src.synthdata import asymmetric_test_sets
from src.training.metrics import aggregate_over_seeds
from src.training.trainer import run_experiment


logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["gate", "variant", "impute", "seed", "final_f1", "final_auc",
                   "final_usage_entropy", "oscillation", "missing_rate"]
FAILURE_COLUMNS = ["gate", "variant", "impute", "seed", "missing_rate", "error"]
CSV_FLOAT_FORMAT = "%.17g"

ABLATION_LABELS = {
    (GateKind.CONFNET, ImputeMode.FULL): "full",
    (GateKind.SOFTMAX, ImputeMode.FULL): "w/o Conf",
    (GateKind.CONFNET, ImputeMode.OFF): "w/o impute",
    (GateKind.CONFNET, ImputeMode.PRE_ONLY): "w/o post-impute",
    (GateKind.SOFTMAX, ImputeMode.OFF): "w/o impute & Conf",
}


def ablation_label(gate: GateKind, impute: ImputeMode) -> str:
    """Module-dropout row name for a (gate, impute) pair."""
    return ABLATION_LABELS.get((gate, impute), f"{gate.value}/{impute.value}")


@dataclass
class SweepSpec:
    """Axes of a sweep on top of a base experiment"""
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    gates: List[GateKind] = field(default_factory=lambda: [GateKind.CONFNET])
    variants: List[Variant] = field(default_factory=lambda: [Variant.TOKEN])
    impute: List[ImputeMode] = field(default_factory=lambda: [ImputeMode.FULL])
    seeds: List[int] = field(default_factory=lambda: [2023])
    missing_rates: Optional[List[float]] = None
    test_present_sets: Optional[List[List[int]]] = None
    output_dir: str = "runs/sweep"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SweepSpec':
        if not isinstance(data, dict):
            raise ConfigurationError("Sweep document must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown keys in sweep: {', '.join(unknown)}")

        base = ExperimentConfig.from_dict(data.get("base", {}))
        spec = cls(
            base=base,
            gates=[_parse_enum(GateKind, g, "gates") for g in data.get("gates", ["confnet"])],
            variants=[_parse_enum(Variant, v, "variants") for v in data.get("variants", ["token"])],
            impute=[_parse_enum(ImputeMode, m, "impute") for m in data.get("impute", ["full"])],
            seeds=[int(s) for s in data.get("seeds", [base.model.seed])],
            missing_rates=_as_rates(data.get("missing_rates")),
            test_present_sets=_as_present_sets(data.get("test_present_sets"), base.synth.num_modalities),
            output_dir=str(data.get("output_dir", "runs/sweep"))
        )
        if not (spec.gates and spec.variants and spec.impute and spec.seeds):
            raise ConfigurationError("Every sweep axis needs at least one value")
        return spec


def _as_rates(value: Any) -> Optional[List[float]]:
    if value is None:
        return None
    rates = [float(rate) for rate in value]
    if any(not 0.0 <= rate < 1.0 for rate in rates):
        raise ConfigurationError(f"missing_rates must lie in [0, 1): {rates}")
    return rates


def _as_present_sets(value: Any, num_modalities: int) -> Optional[List[List[int]]]:
    if value is None:
        return None
    if value == "all":
        return [list(subset) for subset in asymmetric_test_sets(num_modalities)]
    return [list(subset) for subset in value]


@dataclass
class RunSpec:
    """One cell of the sweep grid"""
    gate: GateKind
    variant: Variant
    impute: ImputeMode
    seed: int
    missing_rate: Optional[float]
    test_present_set: Optional[List[int]]
    config: ExperimentConfig
    run_dir: str

    def key(self) -> Dict[str, Any]:
        row = {
            "gate": self.gate.value,
            "variant": self.variant.value,
            "impute": self.impute.value,
            "seed": self.seed,
            "missing_rate": self.missing_rate
        }
        if self.test_present_set is not None:
            row["test_present_set"] = "+".join(str(m) for m in self.test_present_set)
        return row


def run_name(gate: GateKind, variant: Variant, impute: ImputeMode, seed: int,
             missing_rate: Optional[float] = None, test_present_set: Optional[List[int]] = None) -> str:
    name = f"{gate.value}-{variant.value}-{impute.value}-seed{seed}"
    if missing_rate is not None:
        name += f"-rate{missing_rate:g}"
    if test_present_set is not None:
        name += "-present" + "".join(str(m) for m in test_present_set)
    return name


def _protocol_for(base: Protocol, missing_rate: Optional[float],
                  test_present_set: Optional[List[int]]) -> Protocol:
    if test_present_set is not None:
        train_rate = missing_rate if missing_rate is not None else base.train_rate
        return Protocol(kind=ProtocolKind.ASYMMETRIC, train_rate=train_rate,
                        test_present_set=list(test_present_set))
    if missing_rate is not None:
        return Protocol(kind=ProtocolKind.RANDOM_DROPOUT, rate=missing_rate)
    return base


def expand(spec: SweepSpec) -> List[RunSpec]:
    """Every valid combination; the expert variant only exists for the confnet gate."""
    runs = []
    rates = spec.missing_rates or [None]
    present_sets = spec.test_present_sets or [None]
    for gate in spec.gates:
        for variant in spec.variants:
            if variant == Variant.EXPERT and gate != GateKind.CONFNET:
                logger.info("Skipping %s with the expert variant (needs confnet)", gate.value)
                continue
            for impute in spec.impute:
                for rate in rates:
                    for present in present_sets:
                        for seed in spec.seeds:
                            model = replace(spec.base.model, gate=gate, variant=variant,
                                            impute=impute, seed=seed)
                            protocol = _protocol_for(spec.base.protocol, rate, present)
                            name = run_name(gate, variant, impute, seed, rate, present)
                            run_dir = str(Path(spec.output_dir) / name)
                            config = replace(spec.base, model=model, protocol=protocol, output_dir=run_dir)
                            runs.append(RunSpec(gate, variant, impute, seed, rate, present, config, run_dir))
    return runs


def is_finished(run_dir: str) -> bool:
    return (Path(run_dir) / "run_meta.json").exists()


def _load_summary(run_dir: str) -> Dict[str, Any]:
    with open(Path(run_dir) / "run_meta.json", 'r', encoding='utf-8') as f:
        summary = json.load(f)["summary"]
    return {key: (math.nan if value is None else value) for key, value in summary.items()}


def execute_run(run: RunSpec) -> Tuple[Dict[str, Any], Optional[str]]:
    """Worker entry point: (result row, error message or None). Never raises."""
    row = run.key()
    if is_finished(run.run_dir):
        logger.info("Skipping finished run %s", run.run_dir)
        row.update(_load_summary(run.run_dir))
        return row, None
    try:
        result = run_experiment(run.config, run_dir=run.run_dir)
    except Exception as e:
        return row, f"{type(e).__name__}: {e}"
    row.update(result.summary())
    return row, None


class SweepOrchestrator:
    """
    Runs every cell of a sweep, jobs at a time.
    Each child owns its run directory; results merge by file.
    """

    def __init__(self, spec: SweepSpec, jobs: int = 1, output_dir: Optional[str] = None):
        if jobs < 1:
            raise ConfigurationError(f"--jobs must be >= 1, got {jobs}")
        self.spec = spec
        self.jobs = jobs
        self.output_dir = Path(output_dir or spec.output_dir)
        if output_dir:
            self.spec = replace(spec, output_dir=output_dir)

    def run(self) -> pd.DataFrame:
        runs = expand(self.spec)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        print("\n" + "=" * 70)
        print("CONFSMOE SWEEP")
        print("=" * 70)
        pending = sum(1 for run in runs if not is_finished(run.run_dir))
        print(f"\n[Step 1/2] Running {len(runs)} runs ({len(runs) - pending} already finished, "
              f"{self.jobs} job(s))...")

        if self.jobs == 1:
            outcomes = [execute_run(run) for run in runs]
        else:
            with Pool(processes=self.jobs) as pool:
                outcomes = pool.map(execute_run, runs, chunksize=1)

        rows, failures = [], []
        for row, error in outcomes:
            if error is None:
                rows.append(row)
            else:
                failures.append({**row, "error": error})
                print(f"✗ {run_name_from_row(row)}: {error}")
        print(f"✓ {len(rows)}/{len(runs)} runs completed")

        print("\n[Step 2/2] Writing summaries...")
        summary = self._write_outputs(rows, failures)
        self._print_summary(summary)
        return summary

    def _write_outputs(self, rows: List[Dict[str, Any]], failures: List[Dict[str, Any]]) -> pd.DataFrame:
        columns = list(SUMMARY_COLUMNS)
        if self.spec.test_present_sets is not None:
            columns.append("test_present_set")

        summary = pd.DataFrame(rows, columns=columns)
        summary.to_csv(self.output_dir / "summary.csv", index=False, float_format=CSV_FLOAT_FORMAT)

        failure_columns = list(FAILURE_COLUMNS)
        if self.spec.test_present_sets is not None:
            failure_columns.insert(-1, "test_present_set")
        pd.DataFrame(failures, columns=failure_columns).to_csv(self.output_dir / "failures.csv", index=False)

        if not summary.empty:
            groups = ["gate", "variant", "impute", "missing_rate"] + columns[len(SUMMARY_COLUMNS):]
            keyed = summary.assign(missing_rate=summary["missing_rate"].fillna(-1.0))
            by_seed = aggregate_over_seeds(
                keyed, groups, ["final_f1", "final_auc", "final_usage_entropy", "oscillation"])
            by_seed["missing_rate"] = by_seed["missing_rate"].where(by_seed["missing_rate"] >= 0)
            by_seed.to_csv(self.output_dir / "summary_by_seed.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        print(f"✓ Summary written to: {self.output_dir / 'summary.csv'}")
        return summary

    def _print_summary(self, summary: pd.DataFrame):
        print("\n" + "=" * 70)
        print("SWEEP SUMMARY")
        print("=" * 70)
        if summary.empty:
            print("No completed runs.")
        for (gate, impute), group in summary.groupby(["gate", "impute"], sort=True):
            label = ablation_label(GateKind(gate), ImputeMode(impute))
            print(f"  {label:<20} F1 {group['final_f1'].mean():.4f}  AUC {group['final_auc'].mean():.4f}  "
                  f"entropy {group['final_usage_entropy'].mean():.4f}  ({len(group)} runs)")
        print("=" * 70)


def run_name_from_row(row: Dict[str, Any]) -> str:
    present = row.get("test_present_set")
    return run_name(GateKind(row["gate"]), Variant(row["variant"]), ImputeMode(row["impute"]), row["seed"],
                    row.get("missing_rate"), [int(m) for m in present.split("+")] if present else None)
