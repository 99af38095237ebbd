import math

import numpy as np
import pytest
import torch

from src.errors import DimensionError, DomainError, UndefinedMetricError
from src.gating import DTYPE, GateOutput, gate_mean, gate_softmax
from src.moe import (
    ExpertPool, SelectionTrace, combine_expert_outputs, moe_expert_outputs, moe_forward,
    record_selection, selection_oscillation, usage_entropy
)
from src.numeric_core import entropy


def _pool(dim: int, num_experts: int, rng=None) -> ExpertPool:
    pool = ExpertPool(dim, num_experts)
    with torch.no_grad():
        if rng is None:
            pool.weight.zero_()
        else:
            pool.weight.copy_(torch.as_tensor(rng.normal(size=(num_experts, dim, dim))))
            pool.bias.copy_(torch.as_tensor(rng.normal(size=(num_experts, dim))))
    return pool


def _fixed_gate(topk, weights, num_experts: int) -> GateOutput:
    topk = torch.as_tensor(topk)
    return GateOutput(scores=torch.zeros(topk.shape[0], num_experts, dtype=DTYPE), topk=topk,
                      weights=torch.as_tensor(weights, dtype=DTYPE))


class TestMoeForward:
    def test_zero_experts_are_identity(self):
        rng = np.random.default_rng(42)
        h = torch.as_tensor(rng.normal(size=(5, 3)))
        gate = gate_softmax(h, torch.as_tensor(rng.normal(size=(3, 4))), 2)
        assert torch.equal(moe_forward(h, gate, _pool(3, 4)), h)

    def test_identity_expert_doubles_positive_input(self):
        pool = _pool(3, 2)
        with torch.no_grad():
            pool.weight[0] = torch.eye(3, dtype=DTYPE)
        h = torch.tensor([[0.5, 1.0, 2.0]], dtype=DTYPE)
        out = moe_forward(h, _fixed_gate([[0]], [[1.0]], 2), pool)
        torch.testing.assert_close(out, 2.0 * h, rtol=0, atol=0)

    def test_matches_explicit_loop(self):
        rng = np.random.default_rng(42)
        pool = _pool(3, 4, rng)
        h = rng.normal(size=(1, 3))
        gate = gate_softmax(torch.as_tensor(h), torch.as_tensor(rng.normal(size=(3, 4))), 2)

        weight, bias = pool.weight.detach().numpy(), pool.bias.detach().numpy()
        expected = h[0].copy()
        for slot, expert in enumerate(gate.topk[0].tolist()):
            expected += gate.weights[0, slot].item() * np.maximum(weight[expert] @ h[0] + bias[expert], 0.0)
        np.testing.assert_allclose(moe_forward(torch.as_tensor(h), gate, pool).detach().numpy()[0], expected,
                                   atol=1e-14)

    def test_mean_gate_with_every_expert_selected(self):
        rng = np.random.default_rng(42)
        pool = _pool(3, 4, rng)
        h = torch.as_tensor(rng.normal(size=(6, 3)))
        gate = gate_mean(h, torch.as_tensor(rng.normal(size=(3, 4))), 4)
        expected = h + pool(h).mean(dim=1)
        torch.testing.assert_close(moe_forward(h, gate, pool), expected, rtol=0, atol=1e-14)

    def test_weight_override(self):
        rng = np.random.default_rng(42)
        pool = _pool(3, 4, rng)
        h = torch.as_tensor(rng.normal(size=(2, 3)))
        gate = gate_softmax(h, torch.as_tensor(rng.normal(size=(3, 4))), 2)
        zeros = torch.zeros(2, 2, dtype=DTYPE)
        assert torch.equal(moe_forward(h, gate, pool, weights=zeros), h)

    def test_linear_in_combining_weights(self):
        rng = np.random.default_rng(7)
        pool = _pool(4, 5, rng)
        h = torch.as_tensor(rng.normal(size=(6, 4)))
        gate = gate_softmax(h, torch.as_tensor(rng.normal(size=(4, 5))), 3)
        selected = moe_expert_outputs(h, gate, pool)
        routed = combine_expert_outputs(h, selected, gate.weights) - h
        doubled = combine_expert_outputs(h, selected, 2.0 * gate.weights) - h
        torch.testing.assert_close(doubled, 2.0 * routed, rtol=0, atol=1e-13)
        assert torch.equal(combine_expert_outputs(h, selected, torch.zeros_like(gate.weights)), h)

    def test_gate_and_pool_must_agree(self):
        h = torch.zeros(2, 3, dtype=DTYPE)
        with pytest.raises(DimensionError):
            moe_forward(h, _fixed_gate([[0], [1]], [[1.0], [1.0]], 5), _pool(3, 4))
        with pytest.raises(DimensionError):
            combine_expert_outputs(h, torch.zeros(2, 2, 3, dtype=DTYPE), torch.zeros(2, 3, dtype=DTYPE))


class TestExpertOutputs:
    def test_zero_experts(self):
        h = torch.ones(4, 3, dtype=DTYPE)
        selected = moe_expert_outputs(h, _fixed_gate([[0, 1]] * 4, [[0.5, 0.5]] * 4, 3), _pool(3, 3))
        assert selected.shape == (2, 4, 3)
        assert torch.count_nonzero(selected) == 0

    def test_identity_and_zero_expert(self):
        pool = _pool(2, 2)
        with torch.no_grad():
            pool.weight[0] = torch.eye(2, dtype=DTYPE)
        h = torch.tensor([[1.0, -2.0]], dtype=DTYPE)
        selected = moe_expert_outputs(h, _fixed_gate([[0, 1]], [[0.5, 0.5]], 2), pool)
        torch.testing.assert_close(selected[0], torch.relu(h), rtol=0, atol=0)
        torch.testing.assert_close(selected[1], torch.zeros_like(h), rtol=0, atol=0)

    def test_consistent_with_forward(self):
        rng = np.random.default_rng(42)
        pool = _pool(4, 6, rng)
        h = torch.as_tensor(rng.normal(size=(7, 4)))
        gate = gate_softmax(h, torch.as_tensor(rng.normal(size=(4, 6))), 3)
        selected = moe_expert_outputs(h, gate, pool)
        recombined = h + sum(gate.weights[:, k, None] * selected[k] for k in range(3))
        torch.testing.assert_close(recombined, moe_forward(h, gate, pool), rtol=0, atol=1e-12)
        assert torch.all(selected >= 0)


class TestSelectionTrace:
    def test_single_token(self):
        trace = record_selection(SelectionTrace(num_experts=8), _fixed_gate([[2, 5]], [[0.5, 0.5]], 8), epoch=1)
        assert trace.counts[1].tolist() == [0, 0, 1, 0, 0, 1, 0, 0]

    def test_empty_batch_leaves_trace_unchanged(self):
        trace = SelectionTrace(num_experts=4)
        empty = GateOutput(scores=torch.zeros(0, 4, dtype=DTYPE), topk=torch.zeros(0, 2, dtype=torch.long),
                           weights=torch.zeros(0, 2, dtype=DTYPE))
        record_selection(trace, empty, epoch=1)
        assert trace.counts == {}
        assert trace.last_epoch is None

    def test_totals_count_every_slot(self):
        rng = np.random.default_rng(42)
        h = torch.as_tensor(rng.normal(size=(100, 3)))
        gate = gate_softmax(h, torch.as_tensor(rng.normal(size=(3, 8))), 2)
        trace = record_selection(SelectionTrace(num_experts=8), gate, epoch=3)
        assert trace.total(3) == 200
        assert trace.counts[3].min() >= 0

    def test_epochs_must_not_decrease(self):
        trace = SelectionTrace(num_experts=4)
        record_selection(trace, _fixed_gate([[0, 1]], [[0.5, 0.5]], 4), epoch=2)
        with pytest.raises(DomainError) as excinfo:
            record_selection(trace, _fixed_gate([[0, 1]], [[0.5, 0.5]], 4), epoch=1)
        assert excinfo.value.exit_code == 2

    def test_csv_round_trip(self, tmp_path):
        trace = SelectionTrace(num_experts=3, counts={1: np.array([4, 0, 2]), 2: np.array([1, 1, 4])},
                               last_epoch=2)
        trace.to_csv(str(tmp_path / "selection.csv"))
        loaded = SelectionTrace.read_csv(str(tmp_path / "selection.csv"))
        assert loaded.epochs() == [1, 2]
        np.testing.assert_array_equal(loaded.counts[2], [1, 1, 4])


class TestUsageEntropy:
    def test_collapsed(self):
        trace = SelectionTrace(num_experts=4, counts={1: np.array([0, 9, 0, 0])})
        assert usage_entropy(trace, 1) == 0.0

    def test_uniform(self):
        trace = SelectionTrace(num_experts=8, counts={1: np.full(8, 5)})
        assert usage_entropy(trace, 1) == pytest.approx(math.log(8), abs=1e-12)

    def test_partial(self):
        trace = SelectionTrace(num_experts=4, counts={1: np.array([3, 1, 0, 0])})
        assert usage_entropy(trace, 1) == pytest.approx(entropy([0.75, 0.25, 0.0, 0.0]), abs=1e-15)

    def test_empty_epoch_undefined(self):
        with pytest.raises(UndefinedMetricError):
            usage_entropy(SelectionTrace(num_experts=4), 1)


class TestSelectionOscillation:
    def test_stationary(self):
        trace = SelectionTrace(num_experts=3, counts={e: np.array([2, 1, 1]) * e for e in (1, 2, 3)})
        assert selection_oscillation(trace) == pytest.approx(0.0, abs=1e-15)

    def test_alternating_one_hot(self):
        counts = {e: np.array([4, 0]) if e % 2 else np.array([0, 4]) for e in range(1, 6)}
        assert selection_oscillation(SelectionTrace(num_experts=2, counts=counts)) == 1.0

    def test_three_epochs(self):
        trace = SelectionTrace(num_experts=3, counts={
            1: np.array([2, 2, 0]),  # [0.5, 0.5, 0]
            2: np.array([1, 1, 2]),  # [0.25, 0.25, 0.5]
            3: np.array([0, 4, 0]),  # [0, 1, 0]
        })
        # TV(1,2) = 0.5, TV(2,3) = 0.75
        assert selection_oscillation(trace) == pytest.approx(0.625, abs=1e-15)

    def test_needs_two_epochs(self):
        with pytest.raises(UndefinedMetricError):
            selection_oscillation(SelectionTrace(num_experts=2, counts={1: np.array([1, 1])}))
