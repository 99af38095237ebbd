"""
Synthetic Multimodal Data
Seeded class-conditional token sequences with a controllable shared signal,
per-modality offsets (a deliberate modality gap) and the three missingness
protocols. Datasets persist as a directory of CSV files plus meta.json.
"""

import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import ConfigurationError, DimensionError
from src.experiment_models import Protocol, ProtocolKind, SynthSpec


SPLIT_CODES = {"train": 0, "test": 1}
CSV_FLOAT_FORMAT = "%.17g"


@dataclass
class ModalityBatch:
    """Instances of one split: tokens, labels and the missingness mask."""
    tokens: np.ndarray        # (n, M, s, d) float64; missing slots hold zeros
    labels: np.ndarray        # (n,) int64
    mask: np.ndarray          # (n, M) bool, True = observed
    instance_ids: np.ndarray  # (n,) int64, unique across splits
    split: str
    spec: SynthSpec
    protocol: Optional[Protocol] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_modalities(self) -> int:
        return self.tokens.shape[1]

    def subset(self, indices: Sequence[int]) -> 'ModalityBatch':
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, tokens=self.tokens[indices], labels=self.labels[indices],
                       mask=self.mask[indices], instance_ids=self.instance_ids[indices])

    def missing_rates(self) -> np.ndarray:
        return 1.0 - self.mask.mean(axis=0)


def _split_size(spec: SynthSpec, split: str) -> int:
    if split not in SPLIT_CODES:
        raise ConfigurationError(f"Unknown split: {split}")
    return spec.num_instances if split == "train" else spec.num_test_instances


def generate(spec: SynthSpec, split: str = "train") -> ModalityBatch:
    """
    Draw one split. Class prototypes, modality views and offsets come from a
    stream shared by both splits; instances come from a per-split stream.
    """
    spec.validate()
    n = _split_size(spec, split)
    m_count, s, d, latent, c = spec.num_modalities, spec.seq_len, spec.dim, spec.latent_dim, spec.num_classes

    structure = np.random.default_rng([spec.seed, 0])
    shared_prototypes = structure.normal(0.0, 1.0, size=(c, latent))
    private_prototypes = structure.normal(0.0, 1.0, size=(m_count, c, latent))
    shared_views = structure.normal(0.0, 1.0 / np.sqrt(latent), size=(m_count, s, d, latent))
    private_views = structure.normal(0.0, 1.0 / np.sqrt(latent), size=(m_count, s, d, latent))
    offsets = structure.normal(0.0, spec.offset_scale, size=(m_count, 1, d))

    rng = np.random.default_rng([spec.seed, 1 + SPLIT_CODES[split]])
    if spec.class_balanced:
        labels = rng.permutation(np.arange(n) % c)
    else:
        labels = rng.integers(0, c, size=n)
    labels = labels.astype(np.int64)

    z_shared = shared_prototypes[labels] + spec.noise_std * rng.normal(size=(n, latent))
    z_private = (private_prototypes[:, labels].transpose(1, 0, 2)
                 + spec.noise_std * rng.normal(size=(n, m_count, latent)))

    rho = spec.shared_signal_strength
    tokens = (rho * np.einsum('msdl,nl->nmsd', shared_views, z_shared)
              + (1.0 - rho) * np.einsum('msdl,nml->nmsd', private_views, z_private)
              + offsets[None]
              + spec.noise_std * rng.normal(size=(n, m_count, s, d)))

    first_id = 0 if split == "train" else spec.num_instances
    return ModalityBatch(
        tokens=tokens,
        labels=labels,
        mask=np.ones((n, m_count), dtype=bool),
        instance_ids=np.arange(first_id, first_id + n, dtype=np.int64),
        split=split,
        spec=spec
    )


def resolve_modalities(selection: Sequence[Union[int, str]], names: List[str]) -> List[int]:
    """Map modality names or indices to sorted unique indices."""
    indices = set()
    for item in selection:
        if isinstance(item, str) and not item.isdigit():
            if item not in names:
                raise ConfigurationError(f"Unknown modality '{item}' (known: {', '.join(names)})")
            indices.add(names.index(item))
        else:
            index = int(item)
            if not 0 <= index < len(names):
                raise ConfigurationError(f"Modality index {index} out of range")
            indices.add(index)
    return sorted(indices)


def _draw_mask(rng: np.random.Generator, n: int, missing_probs: np.ndarray) -> np.ndarray:
    """Independent drops per modality, rows with nothing observed redrawn."""
    observed = rng.random((n, missing_probs.size)) >= missing_probs
    empty = ~observed.any(axis=1)
    while empty.any():
        observed[empty] = rng.random((int(empty.sum()), missing_probs.size)) >= missing_probs
        empty = ~observed.any(axis=1)
    return observed


def apply_protocol(dataset: ModalityBatch, protocol: Protocol, split: str, seed: int) -> ModalityBatch:
    """Draw a missingness mask for every instance and zero the missing tokens."""
    m_count = dataset.num_modalities
    protocol.validate(m_count)
    rng = np.random.default_rng([int(seed), SPLIT_CODES[split], 7])
    n = len(dataset)

    if protocol.kind == ProtocolKind.RANDOM_DROPOUT:
        mask = _draw_mask(rng, n, np.full(m_count, protocol.rate))
    elif protocol.kind == ProtocolKind.NATURAL_FIXED:
        mask = _draw_mask(rng, n, np.asarray(protocol.missing_probs, dtype=np.float64))
    elif split == "train":
        mask = _draw_mask(rng, n, np.full(m_count, protocol.train_rate))
    else:
        present = resolve_modalities(protocol.test_present_set, dataset.spec.names())
        if not present:
            raise ConfigurationError("test_present_set selects no modality")
        mask = np.zeros((n, m_count), dtype=bool)
        mask[:, present] = True

    tokens = dataset.tokens * mask[:, :, None, None]
    return replace(dataset, tokens=tokens, mask=mask, split=split, protocol=protocol)


def asymmetric_test_sets(num_modalities: int) -> List[Tuple[int, ...]]:
    """Every non-empty proper subset of modalities: single modalities, then pairs, ..."""
    return [
        subset
        for size in range(1, num_modalities)
        for subset in itertools.combinations(range(num_modalities), size)
    ]


def modality_gap(dataset: ModalityBatch) -> float:
    """Mean pairwise distance between per-modality centroids of observed tokens."""
    centroids = []
    for m in range(dataset.num_modalities):
        observed = dataset.tokens[dataset.mask[:, m], m]
        if observed.size:
            centroids.append(observed.reshape(-1, observed.shape[-1]).mean(axis=0))
    if len(centroids) < 2:
        return 0.0
    return float(np.mean([np.linalg.norm(a - b) for a, b in itertools.combinations(centroids, 2)]))


def save_dataset(dataset: ModalityBatch, directory: str):
    """Write meta.json, data.csv, labels.csv and mask.csv."""
    output_dir = Path(directory)
    output_dir.mkdir(parents=True, exist_ok=True)

    n, m_count, s, d = dataset.tokens.shape
    meta = {
        "split": dataset.split,
        "num_instances": n,
        "synth": dataset.spec.to_dict(),
        "protocol": dataset.protocol.to_dict() if dataset.protocol else None
    }
    with open(output_dir / "meta.json", 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2)

    instance, modality, token, dim = np.meshgrid(
        dataset.instance_ids, np.arange(m_count), np.arange(s), np.arange(d), indexing='ij')
    pd.DataFrame({
        "instance_id": instance.ravel(),
        "modality_id": modality.ravel(),
        "token_idx": token.ravel(),
        "dim_idx": dim.ravel(),
        "value": dataset.tokens.ravel()
    }).to_csv(output_dir / "data.csv", index=False, float_format=CSV_FLOAT_FORMAT)

    pd.DataFrame({"instance_id": dataset.instance_ids, "label": dataset.labels}).to_csv(
        output_dir / "labels.csv", index=False)

    ids, modalities = np.meshgrid(dataset.instance_ids, np.arange(m_count), indexing='ij')
    pd.DataFrame({
        "instance_id": ids.ravel(),
        "modality_id": modalities.ravel(),
        "observed": dataset.mask.ravel().astype(int)
    }).to_csv(output_dir / "mask.csv", index=False)


def load_dataset(directory: str) -> ModalityBatch:
    input_dir = Path(directory)
    if not input_dir.exists():
        raise FileNotFoundError(f"Dataset directory not found: {input_dir}")

    with open(input_dir / "meta.json", 'r', encoding='utf-8') as f:
        meta = json.load(f)
    spec = SynthSpec.from_dict(meta["synth"])
    protocol = Protocol.from_dict(meta["protocol"]) if meta.get("protocol") else None

    labels_frame = pd.read_csv(input_dir / "labels.csv")
    instance_ids = labels_frame["instance_id"].to_numpy(dtype=np.int64)
    n = instance_ids.size

    data = pd.read_csv(input_dir / "data.csv", float_precision="round_trip")
    expected = n * spec.num_modalities * spec.seq_len * spec.dim
    if len(data) != expected:
        raise DimensionError(f"data.csv holds {len(data)} values, expected {expected}")
    tokens = data["value"].to_numpy(dtype=np.float64).reshape(n, spec.num_modalities, spec.seq_len, spec.dim)

    mask = pd.read_csv(input_dir / "mask.csv")["observed"].to_numpy().astype(bool)
    return ModalityBatch(
        tokens=tokens,
        labels=labels_frame["label"].to_numpy(dtype=np.int64),
        mask=mask.reshape(n, spec.num_modalities),
        instance_ids=instance_ids,
        split=meta["split"],
        spec=spec,
        protocol=protocol
    )
