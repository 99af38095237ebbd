import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

from src.errors import ConfigurationError, NumericalFailure
from src.experiment_models import ExperimentConfig, GateKind, ImputeMode, MetricsRow, Split
from src.gating import DTYPE, GateOutput
from src.training.model import ModelOutput
from src.training.trainer import Trainer, run_experiment


def _finite_difference_check(trainer: Trainer, batch, samples: int = 20, step: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences on sampled parameter entries."""
    trainer.model.eval()
    tokens, mask = trainer.prepare_inputs(batch, 1, "train")
    labels = torch.as_tensor(batch.labels)
    p_target = torch.full((len(batch),), 0.6, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return trainer.objective(trainer.model(tokens, mask), labels, p_target).total

    trainer.model.zero_grad()
    loss().backward()

    params = [p for p in trainer.model.parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(samples):
        param = params[rng.integers(len(params))]
        index = tuple(int(rng.integers(n)) for n in param.shape)
        analytic = param.grad[index].item()
        with torch.no_grad():
            original = param[index].item()
            param[index] = original + step
            upper = loss().item()
            param[index] = original - step
            lower = loss().item()
            param[index] = original
        numeric = (upper - lower) / (2.0 * step)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
    return worst


class TestObjective:
    def test_components_follow_the_gate(self, tiny_model_config, tiny_datasets):
        train, test = tiny_datasets
        batch = train.subset(np.arange(8))
        labels = torch.as_tensor(batch.labels)
        expected = {GateKind.CONFNET: ("conf",), GateKind.SOFTMAX_LB: ("lb",), GateKind.SOFTMAX: ()}

        for gate, active in expected.items():
            trainer = Trainer(replace(tiny_model_config, gate=gate), train, test)
            tokens, mask = trainer.prepare_inputs(batch, 1, "train")
            objective = trainer.objective(trainer.model(tokens, mask), labels)
            for name in ("conf", "lb"):
                value = getattr(objective, name).item()
                assert (value > 0.0) if name in active else (value == 0.0)
            total = (objective.task + tiny_model_config.conf_loss_weight * objective.conf
                     + tiny_model_config.lb_loss_weight * objective.lb)
            assert objective.total.item() == pytest.approx(total.item(), abs=1e-12)

    @pytest.mark.parametrize("gate", [GateKind.CONFNET, GateKind.SOFTMAX_LB])
    def test_gradient_matches_finite_differences(self, tiny_model_config, tiny_datasets, gate):
        train, test = tiny_datasets
        trainer = Trainer(replace(tiny_model_config, gate=gate), train, test)
        assert _finite_difference_check(trainer, train.subset(np.arange(8))) <= 1e-4

    def test_confidence_loss_leaves_classifier_untouched(self, tiny_model_config, tiny_datasets):
        train, test = tiny_datasets
        trainer = Trainer(tiny_model_config, train, test)
        batch = train.subset(np.arange(8))
        tokens, mask = trainer.prepare_inputs(batch, 1, "train")
        objective = trainer.objective(trainer.model(tokens, mask), torch.as_tensor(batch.labels))

        trainer.model.zero_grad(set_to_none=True)
        objective.conf.backward()
        for param in trainer.model.classifier.parameters():
            assert param.grad is None or torch.count_nonzero(param.grad) == 0
        assert torch.count_nonzero(trainer.model.gate.pool.weight.grad) > 0

    def test_perfect_prediction_with_full_confidence_is_the_joint_minimum(self, tiny_model_config,
                                                                          tiny_datasets):
        trainer = Trainer(tiny_model_config, *tiny_datasets)
        labels = torch.tensor([0, 2, 1])
        logits = torch.full((3, 3), -1000.0, dtype=DTYPE).scatter(-1, labels.unsqueeze(-1), 1000.0)
        tokens = 3 * 2
        topk = torch.tensor([[0, 1]] * tokens)
        output = ModelOutput(
            logits=logits, probs=torch.softmax(logits, dim=-1),
            gate=GateOutput(scores=torch.ones(tokens, 4, dtype=DTYPE), topk=topk,
                            weights=torch.ones(tokens, 2, dtype=DTYPE)),
            weights=torch.ones(tokens, 2, dtype=DTYPE),
            expert_outputs=torch.zeros(3, 1, 2, 2, 8, dtype=DTYPE),
            hidden=torch.zeros(3, 1, 2, 8, dtype=DTYPE),
            combined=torch.zeros(3, 1, 2, 8, dtype=DTYPE))
        objective = trainer.objective(output, labels)
        assert objective.task.item() == 0.0
        assert objective.conf.item() == 0.0
        assert objective.total.item() == 0.0


def _train_set_loss(trainer: Trainer) -> float:
    trainer.model.eval()
    tokens, mask = trainer.prepare_inputs(trainer.train_data, 0, "train")
    with torch.no_grad():
        output = trainer.model(tokens, mask)
        return trainer.objective(output, torch.as_tensor(trainer.train_data.labels)).total.item()


class TestTrainer:
    def test_prepare_inputs(self, tiny_model_config, tiny_datasets):
        train, test = tiny_datasets
        batch = train.subset(np.arange(16))
        assert not batch.mask.all()

        off = Trainer(replace(tiny_model_config, impute=ImputeMode.OFF), train, test)
        tokens, mask = off.prepare_inputs(batch, 1, "train")
        assert torch.count_nonzero(tokens[~mask]) == 0

        full = Trainer(tiny_model_config, train, test)
        tokens, mask = full.prepare_inputs(batch, 1, "train")
        np.testing.assert_array_equal(tokens[mask].numpy(), batch.tokens[batch.mask])
        assert torch.count_nonzero(tokens[~mask]) > 0

    def test_fit_rows(self, tiny_model_config, tiny_datasets):
        result = Trainer(tiny_model_config, *tiny_datasets).fit()
        assert [(row.epoch, row.split) for row in result.metrics] == [
            (0, "test"), (1, "train"), (1, "test"), (2, "train"), (2, "test")]
        assert result.trace.epochs() == [1, 2]
        summary = result.summary()
        assert 0.0 <= summary["final_f1"] <= 1.0
        assert summary["final_usage_entropy"] >= 0.0
        assert summary["oscillation"] >= 0.0

    def test_metrics_row_split(self):
        row = MetricsRow(epoch=1, split=Split.TRAIN, loss_task=0.5, loss_conf=0.0, loss_lb=0.0,
                         f1_macro=0.5, auc=0.5)
        assert row.split == "train"
        assert row.to_dict()["split"] == "train"
        with pytest.raises(ConfigurationError):
            MetricsRow(epoch=1, split="valid", loss_task=0.5, loss_conf=0.0, loss_lb=0.0,
                       f1_macro=0.5, auc=0.5)

    def test_zero_epochs(self, tiny_model_config, tiny_datasets):
        result = Trainer(replace(tiny_model_config, epochs=0), *tiny_datasets).fit()
        assert len(result.metrics) == 1
        assert result.metrics[0].split == "test"
        assert np.isnan(result.summary()["final_usage_entropy"])

    def test_nan_loss_raises(self, tiny_model_config, tiny_datasets):
        trainer = Trainer(tiny_model_config, *tiny_datasets)
        with torch.no_grad():
            trainer.model.classifier.weight.fill_(float("nan"))
        with pytest.raises(NumericalFailure):
            trainer.step(tiny_datasets[0].subset(np.arange(4)), 1)

    def test_attention_frame(self, tiny_model_config, tiny_datasets):
        train, test = tiny_datasets
        frame = Trainer(tiny_model_config, train, test).attention_frame(test, 0)
        assert list(frame.columns) == ["instance_id", "query_modality", "key_modality",
                                       "query_idx", "key_idx", "weight"]
        assert len(frame) > 0
        assert set(frame["instance_id"]) <= set(test.instance_ids[:16].tolist())


class TestRunExperiment:
    def test_outputs_are_deterministic(self, tiny_config, tmp_path):
        for name in ("a", "b"):
            run_experiment(tiny_config, run_dir=str(tmp_path / name))
        for filename in ("metrics.csv", "selection.csv"):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_run_files(self, tiny_config, tmp_path):
        run_experiment(tiny_config, run_dir=str(tmp_path), dump_attention=True)
        metrics = pd.read_csv(tmp_path / "metrics.csv")
        assert list(metrics.columns) == list(MetricsRow.COLUMNS)
        assert len(metrics) == 1 + 2 * tiny_config.model.epochs
        assert (tmp_path / "attention.csv").exists()

        meta = json.loads((tmp_path / "run_meta.json").read_text())
        assert ExperimentConfig.from_dict(meta["config"]) == tiny_config
        assert set(meta["summary"]) == {"final_f1", "final_auc", "final_usage_entropy", "oscillation"}

    def test_gates_select_differently(self, tiny_config, tmp_path):
        softmax = replace(tiny_config, model=replace(tiny_config.model, gate=GateKind.SOFTMAX))
        run_experiment(tiny_config, run_dir=str(tmp_path / "confnet"))
        run_experiment(softmax, run_dir=str(tmp_path / "softmax"))
        assert ((tmp_path / "confnet" / "selection.csv").read_bytes()
                != (tmp_path / "softmax" / "selection.csv").read_bytes())


@pytest.mark.parametrize("gate", list(GateKind))
@pytest.mark.parametrize("seed", [11, 12, 13])
def test_training_lowers_the_objective(tiny_model_config, tiny_datasets, gate, seed):
    trainer = Trainer(replace(tiny_model_config, gate=gate, seed=seed, epochs=10), *tiny_datasets)
    initial = _train_set_loss(trainer)
    trainer.fit()
    assert _train_set_loss(trainer) < initial
