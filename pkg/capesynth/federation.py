"""
Server side and orchestration: derives the noise scales for each mode,
runs every client's synthesis, aggregates the S records of each slot,
decodes labels and returns the released dataset with its accounting report.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .accountant import (AccountingReport, NoiseScales, PrivacyParams, calibrate_tau,
                         cape_split, conventional_local_tau, matched_local_tau, total_epsilon)
from .config import resolve_threads
from .data_io import (Dataset, SyntheticDataset, SyntheticRecord, read_binary_synthetic,
                      write_binary_synthetic)
from .errors import AggregationError, CapeSynthError, ConfigurationError, ContractError, PipelineError
from .noise import Role, draw_zero_sum
from .synthesis import (ClientShard, CorrelatedSlices, SynthesisConfig, partition_dataset,
                        synthesize_local)

logger = logging.getLogger(__name__)

SLOT_BLOCK = 512


class Mode(str, Enum):
    NON_PRIVATE = "non_private"
    CENTRALIZED = "centralized"
    FED_CONVENTIONAL = "fed_conventional"
    FED_CAPE = "fed_cape"

    @classmethod
    def parse(cls, value: str) -> "Mode":
        normalized = value.strip().lower().replace("-", "_")
        for mode in cls:
            if normalized in (mode.value, mode.name.lower()):
                return mode
        raise ConfigurationError(f"unknown mode {value!r}; choose from {', '.join(m.value for m in cls)}")

    def clients(self, S: int) -> int:
        """Number of parties that actually hold data: the centralized mode pools everything"""
        return 1 if self is Mode.CENTRALIZED else S


@dataclass(frozen=True)
class RunConfig:
    """
    Everything run_pipeline needs. tau_central, when given, replaces
    calibration (the CLI's --tau-g).
    """

    mode: Mode
    privacy: PrivacyParams
    master_seed: int = 42
    with_replacement: bool = False
    tau_central: Optional[float] = None
    threads: int = 1
    spool_dir: Optional[str] = None

    @property
    def S(self) -> int:
        return self.mode.clients(self.privacy.S)

    def synthesis(self, scales: NoiseScales) -> SynthesisConfig:
        return SynthesisConfig(l=self.privacy.l, T_s=self.privacy.T, K=self.privacy.K,
                               scales=scales, with_replacement=self.with_replacement)


def noise_scales_for(mode: Mode, tau_central: float, S: int) -> NoiseScales:
    """
    Per-client (tau_g, tau_e) for a mode, given the centrally calibrated scale.

    CAPE and conventional clients both carry S * tau_central of total local
    noise; under CAPE the correlated part cancels at the server, leaving an
    aggregate variance of tau_central^2 (conventional: S * tau_central^2).
    """
    if mode is Mode.NON_PRIVATE or tau_central == 0:
        return NoiseScales(0.0, 0.0)
    if mode is Mode.CENTRALIZED:
        return NoiseScales(tau_central, 0.0)
    local = matched_local_tau(tau_central, S)
    if mode is Mode.FED_CONVENTIONAL:
        return NoiseScales(conventional_local_tau(local, S), 0.0)
    return cape_split(local, S)


def aggregate_slot(records: Sequence[Optional[SyntheticRecord]], t: int = 0) -> SyntheticRecord:
    """
    Coordinate-wise mean of the S client records of one slot.

    Raises:
        AggregationError: a client record is missing or has inconsistent dimensions
    """
    if not records:
        raise AggregationError(f"slot {t}: no client records", slot=t)
    for s, record in enumerate(records):
        if record is None:
            raise AggregationError(f"slot {t}: record of client {s} is absent", slot=t, client=s)
    shapes = {(r.features.shape, r.soft_label.shape) for r in records}
    if len(shapes) != 1:
        raise AggregationError(f"slot {t}: client records have inconsistent dimensions {shapes}", slot=t)
    features = np.mean(np.stack([r.features for r in records]), axis=0)
    soft_label = np.mean(np.stack([r.soft_label for r in records]), axis=0)
    return SyntheticRecord(features, soft_label)


def _aggregate_block(client_blocks: Sequence[Optional[SyntheticDataset]], start: int) -> Tuple[np.ndarray, np.ndarray]:
    for s, block in enumerate(client_blocks):
        if block is None:
            raise AggregationError(f"slot {start}: records of client {s} are absent", slot=start, client=s)
    lengths = {len(b) for b in client_blocks}
    if len(lengths) != 1:
        raise AggregationError(f"slots from {start}: clients returned {sorted(lengths)} records", slot=start)
    features = np.mean(np.stack([b.features for b in client_blocks]), axis=0)
    soft_labels = np.mean(np.stack([b.soft_labels for b in client_blocks]), axis=0)
    return features, soft_labels


def decode_label(soft: np.ndarray) -> int:
    """argmax of the soft label; ties go to the lowest index"""
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 1 or soft.size < 1:
        raise ConfigurationError("soft label must be a non-empty vector")
    if not np.all(np.isfinite(soft)):
        raise ConfigurationError("soft label has non-finite entries")
    return int(np.argmax(soft))


def decode_labels(soft_labels: np.ndarray) -> np.ndarray:
    """Row-wise decode_label"""
    if not np.all(np.isfinite(soft_labels)):
        raise ConfigurationError("soft labels have non-finite entries")
    return np.argmax(soft_labels, axis=1).astype(np.int64)


def _resolve_accounting(cfg: RunConfig) -> Tuple[float, AccountingReport]:
    privacy = cfg.privacy
    if cfg.mode is Mode.NON_PRIVATE:
        privacy = replace(privacy, epsilon_target=math.inf)
    if cfg.tau_central is not None and cfg.mode is not Mode.NON_PRIVATE:
        if cfg.tau_central == 0:
            _, report = calibrate_tau(replace(privacy, epsilon_target=math.inf))
            return 0.0, report
        report = total_epsilon(privacy, cfg.tau_central)
        return cfg.tau_central, report
    # calibration always runs against the centralized setting
    _, report = calibrate_tau(replace(privacy, S=1))
    return report.tau_central, report


def _client_block(shard: ClientShard, synthesis: SynthesisConfig, slices: Optional[CorrelatedSlices],
                  master_seed: int, spool_dir: Optional[Path]) -> SyntheticDataset:
    block = synthesize_local(shard, synthesis, slices, master_seed)
    if spool_dir is None:
        return block
    path = spool_dir / f"client_{shard.client_id:04d}.fdpc"
    write_binary_synthetic(block, path)
    return read_binary_synthetic(path)


class FederatedRun:
    """One execution of the pipeline for a dataset and a RunConfig"""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.S = cfg.S
        self.threads = resolve_threads(cfg.threads)
        self.spool_dir = Path(cfg.spool_dir) if cfg.spool_dir else None
        self._validate()

    def _validate(self):
        privacy, ds = self.cfg.privacy, self.dataset
        if ds.num_classes != privacy.K:
            raise ConfigurationError(f"dataset has K={ds.num_classes}, privacy parameters say K={privacy.K}")
        if len(ds) != privacy.N:
            raise ConfigurationError(f"dataset has N={len(ds)}, privacy parameters say N={privacy.N}")
        if len(ds) % self.S:
            raise ConfigurationError(f"S={self.S} does not divide N={len(ds)}")

    def _prepare_shards(self) -> List[ClientShard]:
        shards = partition_dataset(self.dataset, self.S, self.cfg.master_seed)
        prepared = []
        for shard in shards:
            try:
                prepared.append(shard.preprocessed(self.cfg.privacy.c))
            except CapeSynthError as e:
                raise PipelineError(f"preprocessing failed: {e}", mode=self.cfg.mode.value,
                                    client=shard.client_id, cause=e)
            try:
                prepared[-1].dataset.require_all_classes(owner=f"client {shard.client_id}")
            except ContractError as e:
                raise PipelineError(str(e), mode=self.cfg.mode.value, client=shard.client_id, cause=e)
        return prepared

    def _slices(self, start: int, stop: int, scales: NoiseScales) -> List[Optional[CorrelatedSlices]]:
        if scales.tau_e == 0:
            return [None] * self.S
        num_features, num_classes = self.dataset.num_features, self.dataset.num_classes
        e_x = np.empty((self.S, stop - start, num_features))
        e_y = np.empty((self.S, stop - start, num_classes))
        for row, t in enumerate(range(start, stop)):
            e_x[:, row] = draw_zero_sum(self.cfg.master_seed, t, Role.FEATURE_CORR, self.S, num_features, scales.tau_e)
            e_y[:, row] = draw_zero_sum(self.cfg.master_seed, t, Role.LABEL_CORR, self.S, num_classes, scales.tau_e)
        return [CorrelatedSlices(start, e_x[s], e_y[s]) for s in range(self.S)]

    def _run_block(self, pool: Optional[ThreadPoolExecutor], shards: List[ClientShard],
                   synthesis: SynthesisConfig, start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        slices = self._slices(start, stop, synthesis.scales)
        if slices[0] is None:
            # no dealer: clients generate the block on their own, indexed by t
            synthesis = replace(synthesis, scales=NoiseScales(synthesis.scales.tau_g, 0.0))
            slices = [CorrelatedSlices(start, np.zeros((stop - start, self.dataset.num_features)),
                                       np.zeros((stop - start, self.dataset.num_classes)))] * self.S

        def work(s: int) -> SyntheticDataset:
            try:
                return _client_block(shards[s], synthesis, slices[s], self.cfg.master_seed, self.spool_dir)
            except CapeSynthError as e:
                raise PipelineError(f"client synthesis failed: {e}", mode=self.cfg.mode.value,
                                    client=s, slot=start, cause=e)

        if pool is None:
            blocks = [work(s) for s in range(self.S)]
        else:
            blocks = list(pool.map(work, range(self.S)))
        try:
            return _aggregate_block(blocks, start)
        except AggregationError as e:
            raise PipelineError(str(e), mode=self.cfg.mode.value, client=e.client, slot=e.slot, cause=e)

    def run(self) -> Tuple[SyntheticDataset, AccountingReport]:
        mode = self.cfg.mode
        tau_central, report = _resolve_accounting(self.cfg)
        scales = noise_scales_for(mode, tau_central, self.S)
        report = report.with_scales(scales)
        synthesis = self.cfg.synthesis(scales)
        logger.info(
            f"🚀 Running {mode.value}: S={self.S}, l={synthesis.l}, T={synthesis.T_s}, "
            f"tau_g={scales.tau_g:.6g}, tau_e={scales.tau_e:.6g}, threads={self.threads}"
        )

        shards = self._prepare_shards()
        T = synthesis.T_s
        features = np.empty((T, self.dataset.num_features))
        soft_labels = np.empty((T, self.dataset.num_classes))
        pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 and self.S > 1 else None
        try:
            for start in range(0, T, SLOT_BLOCK):
                stop = min(start + SLOT_BLOCK, T)
                features[start:stop], soft_labels[start:stop] = self._run_block(pool, shards, synthesis, start, stop)
        finally:
            if pool is not None:
                pool.shutdown()

        try:
            decoded = decode_labels(soft_labels)
        except ConfigurationError as e:
            raise PipelineError(f"label decoding failed: {e}", mode=mode.value, cause=e)
        released = SyntheticDataset(features, soft_labels, decoded)
        logger.info(f"✅ Released {T} synthetic records (epsilon={report.epsilon_achieved:.6g})")
        return released, report


def run_pipeline(ds: Dataset, cfg: RunConfig) -> Tuple[SyntheticDataset, AccountingReport]:
    """
    Full federated generation: accounting, partition, per-client
    preprocessing and synthesis, slot aggregation and label decoding.

    Args:
        ds: global dataset (N rows, K classes)
        cfg: mode, privacy parameters, seed and execution options

    Returns:
        (released dataset of T records, accounting report)
    """
    return FederatedRun(ds, cfg).run()
