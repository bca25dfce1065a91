"""
Keyed random streams and noise draws.

Every random draw in capesynth comes from a generator derived from a
StreamKey (master seed, client, sample index, role), so results never depend
on the order or the thread in which draws happen.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

import numpy as np

from .errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

SERVER = "server"
_UINT64 = (1 << 64) - 1


class Role(IntEnum):
    FEATURE_LOCAL = 1
    LABEL_LOCAL = 2
    FEATURE_CORR = 3
    LABEL_CORR = 4
    PARTITION = 5
    MIX_SELECT = 6


@dataclass(frozen=True)
class StreamKey:
    """Identity of one independent random stream"""

    master_seed: int
    client_id: Union[int, str]
    t: int
    role: Role

    def __post_init__(self):
        if self.client_id != SERVER and (not isinstance(self.client_id, (int, np.integer)) or self.client_id < 0):
            raise ConfigurationError(f"client_id must be a non-negative integer or SERVER, got {self.client_id!r}")
        if self.t < 0:
            raise ConfigurationError(f"sample index must be non-negative, got {self.t}")

    def seed_sequence(self) -> np.random.SeedSequence:
        client_code = 0 if self.client_id == SERVER else int(self.client_id) + 1
        return np.random.SeedSequence(
            entropy=int(self.master_seed) & _UINT64,
            spawn_key=(client_code, int(self.t), int(self.role)),
        )

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence())


def draw_gaussian(key: StreamKey, dim: int, tau: float) -> np.ndarray:
    """
    i.i.d. N(0, tau^2) vector of length dim from the stream named by key.

    Returns the zero vector when tau = 0.
    """
    if tau < 0 or not np.isfinite(tau):
        raise ConfigurationError(f"noise scale must be finite and non-negative, got {tau}")
    if tau == 0:
        return np.zeros(dim)
    return key.generator().standard_normal(dim) * tau


def draw_zero_sum(master_seed: int, t: int, role: Role, S: int, dim: int, tau_e: float) -> np.ndarray:
    """
    S correlated vectors that sum to zero, each coordinate marginally N(0, tau_e^2).

    Draws z_s with variance tau_e^2 S/(S-1) and centers them: e_s = z_s - mean(z).
    The dealer runs in-process on the server stream for (t, role).

    Args:
        master_seed: pipeline seed
        t: sample (slot) index
        role: FEATURE_CORR or LABEL_CORR
        S: number of clients
        dim: vector length
        tau_e: marginal standard deviation

    Returns:
        S x dim matrix whose rows are the per-client vectors
    """
    if S < 1:
        raise ConfigurationError(f"S must be >= 1, got {S}")
    if tau_e < 0 or not np.isfinite(tau_e):
        raise ConfigurationError(f"tau_e must be finite and non-negative, got {tau_e}")
    if S == 1:
        if tau_e > 0:
            raise ContractError("zero-sum noise with a single client must have tau_e = 0")
        return np.zeros((1, dim))
    if tau_e == 0:
        return np.zeros((S, dim))
    rng = StreamKey(master_seed, SERVER, t, role).generator()
    z = rng.standard_normal((S, dim)) * (tau_e * np.sqrt(S / (S - 1)))
    return z - z.mean(axis=0, keepdims=True)
