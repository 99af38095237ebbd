import pytest

from src.experiment_models import (
    ExperimentConfig, GateKind, ImputeMode, ModelConfig, Protocol, ProtocolKind, SynthSpec
)
from src.synthdata import apply_protocol, generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec():
    return SynthSpec(num_instances=48, num_test_instances=24, num_modalities=3, seq_len=4, dim=6,
                     num_classes=3, latent_dim=4, seed=7)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(gate=GateKind.CONFNET, num_experts=4, top_k=2, hidden_dim=8, sparsity_b=4,
                       pre_impute_samples=3, impute=ImputeMode.FULL, epochs=2, batch_size=16,
                       dropout_rate=0.0, learning_rate=1e-2, seed=11)


@pytest.fixture
def tiny_config(tiny_spec, tiny_model_config, tmp_path):
    return ExperimentConfig(
        synth=tiny_spec,
        protocol=Protocol(kind=ProtocolKind.RANDOM_DROPOUT, rate=0.5),
        model=tiny_model_config,
        output_dir=str(tmp_path / "run")
    )


@pytest.fixture
def tiny_datasets(tiny_config):
    seed = tiny_config.synth.seed
    train = apply_protocol(generate(tiny_config.synth, "train"), tiny_config.protocol, "train", seed)
    test = apply_protocol(generate(tiny_config.synth, "test"), tiny_config.protocol, "test", seed)
    return train, test
