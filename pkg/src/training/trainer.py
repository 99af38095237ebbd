"""
Trainer
Seeded single-threaded training loop for the ConfSMoE model: the task loss
plus the confidence loss (confnet) or the load-balance loss (softmax_lb),
Adam updates, per-epoch evaluation and run persistence.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from src.errors import NumericalFailure, UndefinedMetricError
from src.experiment_models import ExperimentConfig, GateKind, ImputeMode, MetricsRow, ModelConfig, Split
from src.gating import DTYPE, confidence_loss
from src.imputation import ModalityPool, attention_to_frame, pre_impute_batch
from src.moe import SelectionTrace, record_selection, selection_oscillation, usage_entropy
from src.synthdata import ModalityBatch, apply_protocol, generate, load_dataset
from src.training.metrics import auc_ovr, f1_macro
from src.training.model import ConfSMoEModel, ModelOutput


CSV_FLOAT_FORMAT = "%.17g"


@dataclass
class Objective:
    total: torch.Tensor
    task: torch.Tensor
    conf: torch.Tensor
    lb: torch.Tensor


@dataclass
class RunResult:
    metrics: List[MetricsRow]
    trace: SelectionTrace
    model: ConfSMoEModel

    def final_row(self, split: str = "test") -> MetricsRow:
        rows = [row for row in self.metrics if row.split == split]
        return rows[-1]

    def summary(self) -> Dict[str, float]:
        final = self.final_row(Split.TEST.value)
        epochs = self.trace.epochs()
        entropy_value = usage_entropy(self.trace, epochs[-1]) if epochs else float("nan")
        oscillation = selection_oscillation(self.trace) if len(epochs) >= 2 else float("nan")
        return {
            "final_f1": final.f1_macro,
            "final_auc": final.auc,
            "final_usage_entropy": entropy_value,
            "oscillation": oscillation
        }


def seed_everything(seed: int):
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _safe_auc(labels: np.ndarray, probs: np.ndarray, num_classes: int) -> float:
    try:
        return auc_ovr(labels, probs, num_classes)
    except UndefinedMetricError:
        return float("nan")


class Trainer:
    """
    Trains one model on a train split and evaluates it on a test split.
    The missing-modality pool is built from the observed training instances.
    """

    def __init__(self, config: ModelConfig, train: ModalityBatch, test: ModalityBatch,
                 verbose: bool = False):
        config.validate()
        self.config = config
        self.train_data = train
        self.test_data = test
        self.verbose = verbose
        self.num_classes = train.spec.num_classes

        seed_everything(config.seed)
        _, num_modalities, seq_len, input_dim = train.tokens.shape
        self.model = ConfSMoEModel(config, num_modalities, seq_len, input_dim, self.num_classes)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate,
                                          betas=(0.9, 0.999), eps=1e-8)
        self.pool = ModalityPool.from_arrays(train.tokens, train.mask)
        self.trace = SelectionTrace(num_experts=config.num_experts)
        self.shuffle_rng = np.random.default_rng([config.seed, 11])

    def prepare_inputs(self, batch: ModalityBatch, epoch: int, split: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pre-impute missing slots (fresh draw per instance and epoch) and convert to tensors."""
        tokens = batch.tokens
        if self.config.impute != ImputeMode.OFF and not batch.mask.all():
            tokens = pre_impute_batch(tokens, batch.mask, self.pool, self.config.pre_impute_samples,
                                      self.config.seed, batch.instance_ids, epoch, split)
        return torch.as_tensor(tokens, dtype=DTYPE), torch.as_tensor(batch.mask)

    def objective(self, output: ModelOutput, labels: torch.Tensor,
                  p_target: Optional[torch.Tensor] = None) -> Objective:
        """
        L = CE + w_conf * L_conf (confnet) + w_lb * L_load (softmax_lb).

        Args:
            output: Model output for the batch
            labels: (B,) true classes
            p_target: Optional fixed (B,) confidence targets; defaults to the
                detached predicted probability of the true class
        """
        task = F.cross_entropy(output.logits, labels)
        zero = torch.zeros((), dtype=DTYPE)
        conf, lb = zero, zero

        if self.config.gate == GateKind.CONFNET:
            if p_target is None:
                p_target = output.probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
            tokens_per_instance = output.gate.scores.shape[0] // labels.shape[0]
            p_tokens = p_target.detach().repeat_interleave(tokens_per_instance)
            conf = confidence_loss(output.token_confidences(), p_tokens, self.config.top_k)
        elif self.config.gate == GateKind.SOFTMAX_LB:
            lb = output.gate.aux_loss

        total = task + self.config.conf_loss_weight * conf + self.config.lb_loss_weight * lb
        return Objective(total=total, task=task, conf=conf, lb=lb)

    def step(self, batch: ModalityBatch, epoch: int) -> Tuple[Objective, ModelOutput]:
        """One Adam update on a batch; records the batch's expert selections."""
        self.model.train()
        tokens, mask = self.prepare_inputs(batch, epoch, "train")
        labels = torch.as_tensor(batch.labels)

        output = self.model(tokens, mask)
        objective = self.objective(output, labels)
        if not torch.isfinite(objective.total):
            raise NumericalFailure(
                f"Non-finite loss at epoch {epoch}: task={objective.task.item()}, "
                f"conf={objective.conf.item()}, lb={objective.lb.item()}")

        self.optimizer.zero_grad()
        objective.total.backward()
        self.optimizer.step()

        record_selection(self.trace, output.gate, epoch)
        return objective, output

    def _batches(self, dataset: ModalityBatch, shuffle: bool):
        order = self.shuffle_rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
        for start in range(0, len(dataset), self.config.batch_size):
            yield dataset.subset(order[start:start + self.config.batch_size])

    def train_epoch(self, epoch: int) -> MetricsRow:
        totals = {"task": 0.0, "conf": 0.0, "lb": 0.0}
        labels, probs = [], []
        for batch in self._batches(self.train_data, shuffle=True):
            objective, output = self.step(batch, epoch)
            size = len(batch)
            totals["task"] += objective.task.item() * size
            totals["conf"] += objective.conf.item() * size
            totals["lb"] += objective.lb.item() * size
            labels.append(batch.labels)
            probs.append(output.probs.detach().numpy())
        return self._metrics_row(epoch, Split.TRAIN, totals, len(self.train_data),
                                 np.concatenate(labels), np.concatenate(probs))

    def evaluate(self, dataset: ModalityBatch, epoch: int, split: str = "test") -> MetricsRow:
        self.model.eval()
        totals = {"task": 0.0, "conf": 0.0, "lb": 0.0}
        labels, probs = [], []
        with torch.no_grad():
            for batch in self._batches(dataset, shuffle=False):
                tokens, mask = self.prepare_inputs(batch, epoch, split)
                output = self.model(tokens, mask)
                objective = self.objective(output, torch.as_tensor(batch.labels))
                size = len(batch)
                totals["task"] += objective.task.item() * size
                totals["conf"] += objective.conf.item() * size
                totals["lb"] += objective.lb.item() * size
                labels.append(batch.labels)
                probs.append(output.probs.numpy())
        return self._metrics_row(epoch, split, totals, len(dataset),
                                 np.concatenate(labels), np.concatenate(probs))

    def _metrics_row(self, epoch: int, split: Union[str, Split], totals: Dict[str, float],
                     count: int, labels: np.ndarray, probs: np.ndarray) -> MetricsRow:
        return MetricsRow(
            epoch=epoch,
            split=split,
            loss_task=totals["task"] / count,
            loss_conf=totals["conf"] / count,
            loss_lb=totals["lb"] / count,
            f1_macro=f1_macro(labels, probs.argmax(axis=1), self.num_classes),
            auc=_safe_auc(labels, probs, self.num_classes)
        )

    def fit(self) -> RunResult:
        """Epoch 0 evaluates the untrained model; epochs 1..E train then evaluate."""
        metrics = [self.evaluate(self.test_data, 0)]
        if self.verbose:
            self._print_epoch(metrics[-1], None)

        for epoch in range(1, self.config.epochs + 1):
            train_row = self.train_epoch(epoch)
            test_row = self.evaluate(self.test_data, epoch)
            metrics.extend([train_row, test_row])
            if self.verbose:
                self._print_epoch(test_row, train_row)

        return RunResult(metrics=metrics, trace=self.trace.snapshot(), model=self.model)

    def _print_epoch(self, test_row: MetricsRow, train_row: Optional[MetricsRow]):
        train_part = f"train loss {train_row.loss_task:.4f} | " if train_row else ""
        print(f"  epoch {test_row.epoch}/{self.config.epochs} | {train_part}"
              f"test f1 {test_row.f1_macro:.4f} auc {test_row.auc:.4f}")

    def attention_frame(self, dataset: ModalityBatch, epoch: int) -> pd.DataFrame:
        """Sparse attention weights of the first batch of a split."""
        self.model.eval()
        batch = dataset.subset(np.arange(min(len(dataset), self.config.batch_size)))
        tokens, mask = self.prepare_inputs(batch, epoch, dataset.split)
        with torch.no_grad():
            output = self.model(tokens, mask, capture_attention=True)
        return attention_to_frame(output.attention or {}, batch.mask, batch.instance_ids)


def prepare_datasets(config: ExperimentConfig) -> Tuple[ModalityBatch, ModalityBatch]:
    """Load the dataset directory when it exists, otherwise generate and mask both splits."""
    if config.dataset_dir and Path(config.dataset_dir, "train").exists():
        return (load_dataset(str(Path(config.dataset_dir, "train"))),
                load_dataset(str(Path(config.dataset_dir, "test"))))

    seed = config.synth.seed
    train = apply_protocol(generate(config.synth, "train"), config.protocol, "train", seed)
    test = apply_protocol(generate(config.synth, "test"), config.protocol, "test", seed)
    return train, test


def write_run(run_dir: str, result: RunResult, config: ExperimentConfig):
    """metrics.csv, selection.csv, then run_meta.json (its presence marks a finished run)."""
    output_dir = Path(run_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    pd.DataFrame([row.to_dict() for row in result.metrics], columns=list(MetricsRow.COLUMNS)).to_csv(
        output_dir / "metrics.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    result.trace.to_csv(str(output_dir / "selection.csv"))

    summary = {key: (None if isinstance(value, float) and math.isnan(value) else value)
               for key, value in result.summary().items()}
    with open(output_dir / "run_meta.json", 'w', encoding='utf-8') as f:
        json.dump({"config": config.to_dict(), "summary": summary}, f, indent=2)


def run_experiment(config: ExperimentConfig, run_dir: Optional[str] = None,
                   verbose: bool = False, dump_attention: bool = False) -> RunResult:
    config.validate()
    train, test = prepare_datasets(config)
    trainer = Trainer(config.model, train, test, verbose=verbose)
    result = trainer.fit()
    if run_dir is not None:
        write_run(run_dir, result, config)
        if dump_attention:
            trainer.attention_frame(test, config.model.epochs).to_csv(
                Path(run_dir) / "attention.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    return result
