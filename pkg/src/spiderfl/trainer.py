"""Alternating global/local client updates and FedAvg aggregation.

Per minibatch a client (1) takes an SGD step on its replica of the global
supernet, (2) projects the updated global weights onto its own mask and (3)
takes a regularized SGD step on its local child weights, pulling them towards
that projection. Only the global replica ever leaves the client.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AggregationError, InvariantError, UsageError
from .params import ParamStore
from .search_space import ArchMask, SupernetSpec, forward, mask_weights, param_names

MODES = ("spider", "ditto", "fedavg", "local_adapt")
MODE_ALIASES = {
    "ditto_fixed_arch": "ditto",
    "fedavg_only": "fedavg",
    "local-adapt": "local_adapt",
}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class TrainerConfig:
    eta_w: float = 0.1
    eta_v: float = 0.1
    lam: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    rounds: int = 10
    mode: str = "spider"
    finetune_epochs: int = 1
    finetune_lr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if not (self.eta_w > 0 and self.eta_v > 0):
            raise UsageError("learning rates must be positive")
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.rounds < 0 or self.finetune_epochs < 0:
            raise UsageError("epochs and batch size must be >= 1, rounds >= 0")

    @property
    def has_local_model(self) -> bool:
        return self.mode in ("spider", "ditto")


@dataclass
class ClientData:
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]

    @property
    def num_train(self) -> int:
        return len(self.train[1])


@dataclass
class ClientState:
    cid: int
    data: ClientData
    mask: ArchMask
    local: ParamStore | None
    unsearched: list[int]
    rng: np.random.Generator
    search_rng: np.random.Generator
    spec: SupernetSpec

    @property
    def num_samples(self) -> int:
        return self.data.num_train

    def apply_mask(self, new_mask: ArchMask) -> None:
        if new_mask == self.mask:
            return
        if self.local is not None:
            self.local = reassign_local_after_mask_change(self.local, self.mask, new_mask, self.spec)
        self.mask = new_mask


def client_rngs(seed: int, cid: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (batch order, edge draw) generators for one client."""
    batch_ss, search_ss = np.random.SeedSequence([seed, cid]).spawn(2)
    return np.random.default_rng(batch_ss), np.random.default_rng(search_ss)


def minibatches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def loss_and_grads(params: ParamStore, mask: ArchMask, x, y) -> tuple[float, dict[str, np.ndarray]]:
    logits = forward(params, mask, x)
    loss = ad.cross_entropy_loss(logits, y)
    grads = params.grads_by_name(ad.backward(loss))
    return float(loss.data), grads


def global_step(w: ParamStore, x, y, lr: float) -> ParamStore:
    _, grads = loss_and_grads(w, ArchMask.full(), x, y)
    return ad.sgd_step(w, grads, lr)


def proximal_update(v: np.ndarray, grad: np.ndarray, anchor: np.ndarray, lr: float, lam: float) -> np.ndarray:
    cast = v.dtype.type
    return v - cast(lr) * (grad + cast(lam) * (v - anchor))


def local_step(v: ParamStore, mask: ArchMask, w_share: ParamStore, x, y, lr: float, lam: float) -> ParamStore:
    """``v - lr * (grad F(v) + lam * (v - w_share))`` over v's names."""
    if v.names() != w_share.names():
        raise InvariantError("local weights and shared global weights have different names")
    _, grads = loss_and_grads(v, mask, x, y)
    return v.replace({n: proximal_update(t.data, grads[n], w_share[n].data, lr, lam) for n, t in v.items()})


def reassign_local_after_mask_change(v: ParamStore, old: ArchMask, new: ArchMask, spec: SupernetSpec | None = None) -> ParamStore:
    """Keep the entries of ``v`` still used by ``new``; entries of dropped ops are discarded."""
    if not new.is_subset_of(old):
        raise UsageError("the new mask must be a subset of the old one")
    spec = spec or v.spec
    return v.restrict(param_names(spec, new))


SearchHook = Callable[[ClientState, int], list]


def client_local_round(
    client: ClientState,
    w_global: ParamStore,
    t: int,
    cfg: TrainerConfig,
    searcher: SearchHook | None = None,
) -> tuple[ParamStore, list]:
    """Run ``cfg.local_epochs`` epochs on the client; returns (updated global replica, search events).

    The search hook runs once, at the start of the round. The client's
    local weights, mask and RNG state are updated in place.
    """
    events = searcher(client, t) if searcher is not None else []
    x_train, y_train = client.data.train
    w = w_global
    for _ in range(cfg.local_epochs):
        for idx in minibatches(client.rng, len(y_train), cfg.batch_size):
            xb, yb = x_train[idx], y_train[idx]
            w = global_step(w, xb, yb, cfg.eta_w)
            if cfg.has_local_model:
                w_share = mask_weights(w, client.mask, client.spec)
                client.local = local_step(client.local, client.mask, w_share, xb, yb, cfg.eta_v, cfg.lam)
    return w, events


def ditto_round(client: ClientState, w_global: ParamStore, t: int, cfg: TrainerConfig) -> tuple[ParamStore, list]:
    """Same update as :func:`client_local_round` with the client's architecture frozen."""
    return client_local_round(client, w_global, t, cfg, searcher=None)


def server_aggregate(replicas: Sequence[tuple[ParamStore, int]]) -> ParamStore:
    """Sample-weighted mean of replicas, summed in the given (client id) order.

    Accumulation is in float64 so that identical replicas average back to
    themselves bit-exactly.
    """
    if not replicas:
        raise AggregationError("no replicas to aggregate")
    first, _ = replicas[0]
    names = first.names()
    for w, n in replicas:
        if w.names() != names:
            raise AggregationError("replicas have different parameter names")
        if n <= 0:
            raise AggregationError("sample counts must be positive")
    total = float(sum(n for _, n in replicas))
    out = {}
    for name in names:
        acc = np.zeros(first[name].shape, dtype=np.float64)
        for w, n in replicas:
            acc += float(n) * w[name].data.astype(np.float64)
        out[name] = (acc / total).astype(first[name].dtype)
    return first.replace(out)


def local_adaptation(
    w_final: ParamStore,
    x_train,
    y_train,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    mask: ArchMask | None = None,
) -> ParamStore:
    """Plain-SGD fine-tuning of a copy of the final global model on one client's training split."""
    mask = mask or ArchMask.full()
    params = mask_weights(w_final, mask).copy()
    for _ in range(epochs):
        for idx in minibatches(rng, len(y_train), batch_size):
            _, grads = loss_and_grads(params, mask, x_train[idx], y_train[idx])
            params = ad.sgd_step(params, grads, lr)
    return params
