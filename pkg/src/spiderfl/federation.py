"""Round-based simulation of the server/client loop with deterministic seeding."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, PartitionSpec, lda_partition, load_cifar10_binary, split_client, synth_dataset
from .errors import PartitionError, SpiderError, UsageError
from .params import ParamStore
from .search_space import (
    NUM_EDGES,
    ArchMask,
    SupernetSpec,
    accuracy,
    build_supernet,
    count_activations,
    count_flops,
    count_params,
    mask_weights,
)
from .searcher import ProgressiveSearcher, SearchEvent, SearchSchedule, phase_of
from .trainer import (
    ClientData,
    ClientState,
    TrainerConfig,
    client_local_round,
    client_rngs,
    local_adaptation,
    server_aggregate,
)

log = logging.getLogger(__name__)

SPIDER_FRACTIONS = (0.5, 0.3, 0.2)
BASELINE_FRACTIONS = (0.8, 0.2)
BYTES_PER_SCALAR = 4
FIXED = "fixed"


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "cifar10"
    path: str | None = None
    classes: int = 10
    per_class: int = 64
    image_size: int = 8
    noise: float = 0.3
    seed: int | None = None  # defaults to the run seed

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise UsageError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise UsageError("cifar10 source needs a path")


@dataclass(frozen=True)
class RunConfig:
    supernet: SupernetSpec = field(default_factory=SupernetSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    schedule: SearchSchedule = field(default_factory=SearchSchedule)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    data: DataConfig = field(default_factory=DataConfig)
    fractions: tuple[float, ...] | None = None  # None: 50/30/20 for spider, 80/20 otherwise
    seed: int = 0
    eval_every: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.eval_every < 1 or self.workers < 1:
            raise UsageError("eval_every and workers must be >= 1")

    @property
    def num_clients(self) -> int:
        return self.partition.num_clients

    @property
    def split_fractions(self) -> tuple[float, ...]:
        if self.fractions is not None:
            return tuple(self.fractions)
        return SPIDER_FRACTIONS if self.trainer.mode == "spider" else BASELINE_FRACTIONS


@dataclass
class RoundReport:
    round: int
    phases: list[str]
    accuracy: list[float]
    params: list[int]
    flops: list[int]
    model_size: list[int]
    search_events: list[SearchEvent]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracy))


@dataclass
class RunResult:
    config: RunConfig
    reports: list[RoundReport]
    global_weights: ParamStore
    masks: list[ArchMask]
    local_weights: list[ParamStore | None]
    search_log: list[SearchEvent]


def estimated_model_size(mask: ArchMask, spec: SupernetSpec, input_shape=None) -> int:
    """Bytes for float32 parameters plus every activation of a batch-of-one forward pass."""
    if input_shape is not None and tuple(input_shape) != spec.input_shape:
        spec = replace(spec, input_shape=tuple(input_shape))
    return BYTES_PER_SCALAR * (count_params(mask, spec) + count_activations(mask, spec))


def evaluate_client(weights: ParamStore, mask: ArchMask, split: tuple[np.ndarray, np.ndarray]) -> float:
    """Top-1 accuracy on ``split = (images, labels)``; weights are read, never written."""
    x, y = split
    return accuracy(weights, mask, x, y)


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "cifar10":
        return load_cifar10_binary(d.path)
    seed = cfg.seed if d.seed is None else d.seed
    return synth_dataset(d.classes, d.per_class, d.image_size, seed, noise=d.noise)


def make_clients(cfg: RunConfig, dataset: LabeledDataset, w0: ParamStore, initial_mask: ArchMask, partition=None) -> list[ClientState]:
    parts = lda_partition(dataset.labels, cfg.partition) if partition is None else _check_partition(partition, cfg, dataset)
    clients = []
    for k, idx in enumerate(parts):
        split = split_client(idx, cfg.split_fractions, seed=cfg.seed * 1_000_003 + k)
        if len(split.train) == 0:
            raise UsageError(f"client {k} has no training samples")
        data = ClientData(dataset.subset(split.train), dataset.subset(split.val), dataset.subset(split.test))
        rng, search_rng = client_rngs(cfg.seed, k)
        local = mask_weights(w0, initial_mask).copy() if cfg.trainer.has_local_model else None
        clients.append(
            ClientState(k, data, initial_mask, local, list(range(NUM_EDGES)), rng, search_rng, cfg.supernet)
        )
    return clients


def _check_partition(parts, cfg: RunConfig, dataset: LabeledDataset):
    if len(parts) != cfg.num_clients:
        raise PartitionError(f"partition has {len(parts)} clients, config expects {cfg.num_clients}")
    joined = np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])
    if len(joined) and (joined.min() < 0 or joined.max() >= len(dataset)):
        raise PartitionError("partition indexes samples outside the dataset")
    if len(np.unique(joined)) != len(joined):
        raise PartitionError("partition assigns a sample to more than one client")
    return parts


def _client_phase(cfg: RunConfig, client: ClientState, t: int) -> str:
    if cfg.trainer.mode != "spider":
        return FIXED
    return phase_of(t, cfg.schedule, len(client.unsearched))


def _client_metrics(cfg: RunConfig, client: ClientState, weights: ParamStore, mask: ArchMask):
    spec = cfg.supernet
    acc = evaluate_client(weights, mask, client.data.test)
    return acc, count_params(mask, spec), count_flops(mask, spec), estimated_model_size(mask, spec)


def _report(cfg, t, clients, phases, eval_models, events) -> RoundReport:
    rows = [_client_metrics(cfg, c, w, m) for c, (w, m) in zip(clients, eval_models)]
    return RoundReport(
        round=t,
        phases=list(phases),
        accuracy=[r[0] for r in rows],
        params=[r[1] for r in rows],
        flops=[r[2] for r in rows],
        model_size=[r[3] for r in rows],
        search_events=list(events),
    )


def run_federation(
    cfg: RunConfig,
    dataset: LabeledDataset | None = None,
    initial_mask: ArchMask | None = None,
    on_round=None,
    partition=None,
) -> RunResult:
    """Simulate ``cfg.trainer.rounds`` rounds with full client participation.

    Clients may run on a thread pool (``cfg.workers``); every client owns its
    state and RNG streams and aggregation runs in client-id order, so results
    do not depend on the physical schedule. ``partition`` (per-client index
    arrays) replaces the LDA draw, e.g. to reuse a saved partition.
    """
    tc = cfg.trainer
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if dataset.input_shape != cfg.supernet.input_shape or dataset.num_classes != cfg.supernet.num_classes:
        raise UsageError(
            f"dataset {dataset.input_shape}/{dataset.num_classes} classes does not match supernet "
            f"{cfg.supernet.input_shape}/{cfg.supernet.num_classes}"
        )
    full = ArchMask.full()
    initial_mask = initial_mask or full
    if tc.mode in ("fedavg", "local_adapt") and initial_mask != full:
        raise UsageError("fedavg-style baselines train and evaluate the full supernet")
    w = build_supernet(cfg.supernet, cfg.seed)
    clients = make_clients(cfg, dataset, w, initial_mask, partition)
    searcher = None
    if tc.mode == "spider":
        searcher = ProgressiveSearcher(cfg.schedule, tuple(sorted(cfg.supernet.used_kinds())))

    reports: list[RoundReport] = []
    search_log: list[SearchEvent] = []
    pending: list[SearchEvent] = []
    prev_phases = [_client_phase(cfg, c, -1 if tc.mode == "spider" else 0) for c in clients]
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def task(client):
        return client_local_round(client, w, t, tc, searcher)

    try:
        for t in range(tc.rounds):
            try:
                results = list(pool.map(task, clients)) if pool else [task(c) for c in clients]
                w = server_aggregate([(wk, c.num_samples) for (wk, _), c in zip(results, clients)])
                for _, events in results:
                    pending.extend(events)
                    search_log.extend(events)
                phases = [_client_phase(cfg, c, t) for c in clients]
                last = t == tc.rounds - 1
                if (t + 1) % cfg.eval_every == 0 or last or phases != prev_phases:
                    if last and tc.mode == "local_adapt":
                        models = [(_finetune(cfg, c, w), full) for c in clients]
                    elif tc.has_local_model:
                        models = [(c.local, c.mask) for c in clients]
                    else:
                        models = [(w, full)] * len(clients)
                    reports.append(_report(cfg, t, clients, phases, models, pending))
                    pending = []
                    log.info("round %d mean acc %.4f", t, reports[-1].mean_accuracy)
            except SpiderError as exc:
                exc.round = t
                log.error("run aborted in round %d: %s", t, exc)
                raise
            prev_phases = phases
            if on_round is not None:
                on_round(t, w, clients)
    finally:
        if pool:
            pool.shutdown()

    return RunResult(
        config=cfg,
        reports=reports,
        global_weights=w,
        masks=[c.mask for c in clients],
        local_weights=[c.local for c in clients],
        search_log=search_log,
    )


def _finetune(cfg: RunConfig, client: ClientState, w: ParamStore) -> ParamStore:
    tc = cfg.trainer
    x, y = client.data.train
    lr = tc.finetune_lr if tc.finetune_lr is not None else tc.eta_w
    return local_adaptation(w, x, y, tc.finetune_epochs, lr, tc.batch_size, client.rng)
