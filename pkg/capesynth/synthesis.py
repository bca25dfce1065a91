"""
Client-side generator: partition bookkeeping, class grouping, random
l-sample mixing within a class and noise addition.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .accountant import NoiseScales
from .data_io import Dataset, SyntheticDataset
from .errors import ConfigurationError, ContractError
from .noise import SERVER, Role, StreamKey, draw_gaussian
from .preprocess import preprocess_client

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientShard:
    """One client's local data with its rows grouped by class"""

    client_id: int
    dataset: Dataset
    class_index: Dict[int, np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.class_index is None:
            labels = self.dataset.labels
            index = {k: np.flatnonzero(labels == k) for k in range(self.dataset.num_classes)}
            object.__setattr__(self, "class_index", index)

    def preprocessed(self, c: float) -> "ClientShard":
        """Same client after local z-scoring and clipping"""
        return ClientShard(self.client_id, preprocess_client(self.dataset, c))


@dataclass(frozen=True)
class SynthesisConfig:
    """Per-client generation settings"""

    l: int
    T_s: int
    K: int
    scales: NoiseScales
    with_replacement: bool = False

    def __post_init__(self):
        if self.l < 1 or self.T_s < 1 or self.K < 1:
            raise ConfigurationError(f"l, T_s and K must be positive (got {self.l}, {self.T_s}, {self.K})")
        if self.T_s % self.K:
            raise ConfigurationError(f"K={self.K} must divide T_s={self.T_s}")

    @property
    def per_class(self) -> int:
        return self.T_s // self.K


@dataclass(frozen=True)
class CorrelatedSlices:
    """
    One client's zero-sum noise for the consecutive slots start..start+n-1:
    an n x d_x feature block and an n x K label block.
    """

    start: int
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def partition_dataset(ds: Dataset, S: int, master_seed: int) -> List[ClientShard]:
    """
    Split ds into S disjoint equal shards by a seeded random permutation.

    Args:
        ds: global dataset
        S: number of clients; must divide N
        master_seed: pipeline seed (PARTITION stream)

    Returns:
        S ClientShards of N/S rows each
    """
    if S < 1:
        raise ConfigurationError(f"S must be >= 1, got {S}")
    if len(ds) % S:
        raise ConfigurationError(f"S={S} does not divide N={len(ds)}")
    order = StreamKey(master_seed, SERVER, 0, Role.PARTITION).generator().permutation(len(ds))
    shards = [ClientShard(s, ds.subset(part)) for s, part in enumerate(np.split(order, S))]
    logger.debug(f"🔀 Partitioned {len(ds)} rows into {S} shards of {len(ds) // S}")
    return shards


def mix_once(shard: ClientShard, k: int, l: int, key: StreamKey,
             with_replacement: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Average l randomly selected samples of class k.

    Selection is without replacement when the class has at least l members
    (unless with_replacement is set), with replacement otherwise.

    Returns:
        (mean feature vector, mean one-hot label) without noise
    """
    members = shard.class_index.get(k)
    if members is None or members.size == 0:
        raise ContractError(f"client {shard.client_id} has no samples of class {k}")
    replace = with_replacement or members.size < l
    chosen = key.generator().choice(members, size=l, replace=replace)
    features = shard.dataset.features[chosen].mean(axis=0)
    soft_label = np.zeros(shard.dataset.num_classes)
    soft_label[k] = 1.0
    return features, soft_label


def synthesize_local(shard: ClientShard, cfg: SynthesisConfig,
                     correlated_slices: Optional[CorrelatedSlices], master_seed: int) -> SyntheticDataset:
    """
    Generate this client's noisy records slot by slot, class k = t mod K.

    Args:
        shard: preprocessed client data
        cfg: mixing order, slot count and noise scales
        correlated_slices: zero-sum noise for a run of slots; None only when tau_e = 0,
            in which case all T_s slots are generated
        master_seed: pipeline seed

    Returns:
        Records in slot order; decoded_labels hold the class each slot was mixed from
    """
    num_features = shard.dataset.num_features
    num_classes = shard.dataset.num_classes
    if num_classes != cfg.K:
        raise ConfigurationError(f"shard has K={num_classes}, synthesis config K={cfg.K}")

    if correlated_slices is None:
        if cfg.scales.tau_e > 0:
            raise ContractError(f"client {shard.client_id}: tau_e > 0 but no correlated slices supplied")
        slots = range(cfg.T_s)
        e_x = e_y = None
    else:
        slots = range(correlated_slices.start, correlated_slices.start + len(correlated_slices))
        if slots.start < 0 or slots.stop > cfg.T_s:
            raise ContractError(f"client {shard.client_id}: slots {slots.start}..{slots.stop - 1} outside 0..{cfg.T_s - 1}")
        e_x, e_y = correlated_slices.features, correlated_slices.labels
        if e_x.shape != (len(slots), num_features) or e_y.shape != (len(slots), num_classes):
            raise ContractError(
                f"client {shard.client_id}: missing correlated slice for slots {slots.start}..{slots.stop - 1}"
            )

    small = [k for k, members in shard.class_index.items() if 0 < members.size < cfg.l]
    if small and not cfg.with_replacement:
        logger.warning(f"⚠️  Client {shard.client_id}: classes {small} have fewer than l={cfg.l} samples, "
                       f"mixing them with replacement")

    features = np.empty((len(slots), num_features))
    soft_labels = np.empty((len(slots), num_classes))
    classes = np.empty(len(slots), dtype=np.int64)
    tau_g = cfg.scales.tau_g
    for row, t in enumerate(slots):
        k = t % cfg.K
        x, y = mix_once(shard, k, cfg.l, StreamKey(master_seed, shard.client_id, t, Role.MIX_SELECT),
                        cfg.with_replacement)
        x = x + draw_gaussian(StreamKey(master_seed, shard.client_id, t, Role.FEATURE_LOCAL), num_features, tau_g)
        y = y + draw_gaussian(StreamKey(master_seed, shard.client_id, t, Role.LABEL_LOCAL), num_classes, tau_g)
        if e_x is not None:
            x = x + e_x[row]
            y = y + e_y[row]
        features[row] = x
        soft_labels[row] = y
        classes[row] = k

    logger.debug(f"🧪 Client {shard.client_id} synthesized slots {slots.start}..{slots.stop - 1}")
    return SyntheticDataset(features, soft_labels, classes)
