import numpy as np
import pytest
import torch

from src.errors import ConfigurationError, DimensionError
from src.experiment_models import GateKind, ImputeMode, ModelConfig, Variant
from src.gating import DTYPE, ConfNetPool
from src.training.model import ConfSMoEModel, expert_level_confidence, forward_instance


def _model(config: ModelConfig, seed: int = 0) -> ConfSMoEModel:
    torch.manual_seed(seed)
    return ConfSMoEModel(config, num_modalities=3, seq_len=4, input_dim=6, num_classes=3)


def _inputs(batch: int = 2, seed: int = 42):
    rng = np.random.default_rng(seed)
    tokens = torch.as_tensor(rng.normal(size=(batch, 3, 4, 6)))
    mask = torch.ones(batch, 3, dtype=torch.bool)
    return tokens, mask


class TestConfSMoEModel:
    @pytest.mark.parametrize("gate", list(GateKind))
    def test_forward_shapes(self, tiny_model_config, gate):
        config = ModelConfig(**{**tiny_model_config.__dict__, "gate": gate})
        tokens, mask = _inputs()
        mask[0, 1] = False
        output = _model(config)(tokens, mask)
        assert output.logits.shape == (2, 3)
        assert output.gate.topk.shape == (2 * 3 * 4, 2)
        assert output.expert_outputs.shape == (2, 3, 2, 4, 8)
        np.testing.assert_allclose(output.probs.sum(-1).detach().numpy(), 1.0, atol=1e-12)

    def test_expert_variant_needs_confnet(self, tiny_model_config):
        config = ModelConfig(**{**tiny_model_config.__dict__, "gate": GateKind.SOFTMAX, "variant": Variant.EXPERT})
        with pytest.raises(ConfigurationError):
            _model(config)

    def test_input_shape_checked(self, tiny_model_config):
        with pytest.raises(DimensionError):
            _model(tiny_model_config)(torch.zeros(2, 3, 4, 5, dtype=DTYPE), torch.ones(2, 3, dtype=torch.bool))

    def test_impute_off_zeroes_missing_modality(self, tiny_model_config):
        config = ModelConfig(**{**tiny_model_config.__dict__, "impute": ImputeMode.OFF})
        tokens, mask = _inputs()
        mask[1, 2] = False
        output = _model(config)(tokens, mask)
        assert torch.count_nonzero(output.hidden[1, 2]) == 0
        assert torch.count_nonzero(output.hidden[0, 2]) > 0

    def test_full_imputation_only_touches_missing(self, tiny_model_config):
        tokens, mask = _inputs()
        mask[0, 0] = False
        model = _model(tiny_model_config)
        model.eval()
        imputed = model(tokens, mask)

        pre_only = ModelConfig(**{**tiny_model_config.__dict__, "impute": ImputeMode.PRE_ONLY})
        plain = _model(pre_only)
        plain.load_state_dict(model.state_dict())
        plain.eval()
        reference = plain(tokens, mask)

        torch.testing.assert_close(imputed.combined[0, 1:], reference.combined[0, 1:], rtol=0, atol=0)
        torch.testing.assert_close(imputed.combined[1], reference.combined[1], rtol=0, atol=0)
        assert not torch.allclose(imputed.combined[0, 0], reference.combined[0, 0])

    def test_attention_capture(self, tiny_model_config):
        tokens, mask = _inputs()
        mask[0, 2] = False
        output = _model(tiny_model_config)(tokens, mask, capture_attention=True)
        assert set(output.attention) == {(m, a) for m in range(3) for a in range(3) if m != a}


class TestForwardInstance:
    def test_deterministic(self, tiny_model_config):
        config = ModelConfig(**{**tiny_model_config.__dict__, "dropout_rate": 0.3})
        model = _model(config)
        tokens, _ = _inputs(batch=1)
        mask = np.array([True, False, True])
        first, gate, experts = forward_instance(tokens[0].numpy(), mask, model)
        second, _, _ = forward_instance(tokens[0].numpy(), mask, model)
        np.testing.assert_array_equal(first, second)
        assert first.sum() == pytest.approx(1.0, abs=1e-12)
        assert gate.topk.shape == (12, 2)
        assert experts.shape == (3, 2, 4, 8)


class TestExpertLevelConfidence:
    def _pool(self, seed: int = 42) -> ConfNetPool:
        rng = np.random.default_rng(seed)
        pool = ConfNetPool(3, 4)
        with torch.no_grad():
            pool.weight.copy_(torch.as_tensor(rng.normal(size=(4, 3))))
            pool.bias.copy_(torch.as_tensor(rng.normal(size=4)))
        return pool

    def test_identical_tokens_match_token_level(self):
        pool = self._pool()
        h = torch.tensor([[0.3, -1.0, 2.0]] * 5, dtype=DTYPE)
        topk = torch.tensor([[0, 2], [2, 0], [0, 1], [1, 2], [2, 0]])
        _, slots = expert_level_confidence(h, topk, pool, torch.zeros(5, dtype=torch.long), 1)
        token_level = pool.confidences(h).gather(-1, topk)
        torch.testing.assert_close(slots, token_level, rtol=0, atol=1e-12)

    def test_unrouted_expert_is_excluded(self):
        pool = self._pool()
        h = torch.randn(3, 3, dtype=DTYPE)
        topk = torch.tensor([[0, 1], [1, 0], [0, 1]])
        weights, _ = expert_level_confidence(h, topk, pool, torch.zeros(3, dtype=torch.long), 1)
        assert weights[0, 2].item() == 0.0
        assert weights[0, 3].item() == 0.0
        assert weights[0, 0].item() > 0.0

    def test_two_tokens_by_hand(self):
        pool = self._pool()
        h = torch.tensor([[1.0, 0.0, 2.0], [3.0, -2.0, 0.0]], dtype=DTYPE)
        topk = torch.tensor([[1], [1]])
        weights, slots = expert_level_confidence(h, topk, pool, torch.zeros(2, dtype=torch.long), 1)

        mean = np.array([2.0, -1.0, 1.0])
        u = pool.weight.detach().numpy()[1] @ mean + pool.bias.detach().numpy()[1]
        expected = 1.0 / (1.0 + np.exp(-u))
        assert weights[0, 1].item() == pytest.approx(expected, abs=1e-15)
        np.testing.assert_allclose(slots.detach().numpy(), [[expected], [expected]], atol=1e-12)

    def test_groups_are_separate(self):
        pool = self._pool()
        h = torch.tensor([[1.0, 0.0, 0.0], [0.0, 5.0, 0.0]], dtype=DTYPE)
        topk = torch.tensor([[0], [0]])
        weights, _ = expert_level_confidence(h, topk, pool, torch.tensor([0, 1]), 2)
        per_token = pool.confidences(h)[:, 0]
        torch.testing.assert_close(weights[:, 0], per_token, rtol=0, atol=1e-12)
