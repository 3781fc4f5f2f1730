"""Progressive, perturbation-based operation selection.

Each client starts from the full supernet. After ``warmup_rounds`` rounds, and
then every ``recovery`` rounds, one not-yet-searched edge index is drawn at
random. On that edge, in both the normal and the reduction cell, every active
operation is scored by the validation accuracy of the child with that
operation removed. The operation whose removal hurts most is the only one
kept. No weights are trained or modified while scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .params import ParamStore
from .search_space import CELL_KINDS, NUM_EDGES, OP_INDEX, ArchMask, accuracy

WARMUP, SEARCH, FINAL_TRAIN = "warmup", "search", "final_train"


@dataclass(frozen=True)
class SearchSchedule:
    warmup_rounds: int = 60
    recovery: int = 20

    def __post_init__(self):
        if self.warmup_rounds < 0 or self.recovery < 1:
            raise UsageError("warmup_rounds must be >= 0 and recovery >= 1")

    def fires(self, t: int, remaining: int) -> bool:
        return t >= self.warmup_rounds and t % self.recovery == 0 and remaining > 0

    def event_rounds(self, num_edges: int = NUM_EDGES) -> list[int]:
        """Rounds at which search events fire for ``num_edges`` unsearched edges."""
        first = -(-self.warmup_rounds // self.recovery) * self.recovery
        return [first + i * self.recovery for i in range(num_edges)]


def phase_of(t: int, schedule: SearchSchedule, remaining: int) -> str:
    """Phase of round ``t`` given the number of edges still unsearched after that round's event."""
    if t < schedule.warmup_rounds:
        return WARMUP
    return SEARCH if remaining > 0 else FINAL_TRAIN


@dataclass(frozen=True)
class PerturbationScore:
    edge: int
    op: str
    acc_without: float


@dataclass
class SearchEvent:
    round: int
    client: int
    kind: str
    edge: int
    scores: dict[str, float]
    chosen: str
    forced: bool = False


def select_operation(scores) -> str:
    """Operation with the lowest accuracy-after-removal; ties go to the earliest op in PRIMITIVES.

    ``scores`` is a mapping ``op -> accuracy`` or a sequence of :class:`PerturbationScore`.
    """
    if isinstance(scores, dict):
        items = list(scores.items())
    else:
        items = [(s.op, s.acc_without) for s in scores]
    if not items:
        raise UsageError("select_operation needs at least one score")
    return min(items, key=lambda kv: (kv[1], OP_INDEX[kv[0]]))[0]


def evaluate_without_op(
    mask: ArchMask, kind: str, edge: int, op: str, weights: ParamStore, x_val, y_val
) -> float:
    """Validation accuracy of ``mask`` with ``op`` dropped from ``edge``; the edge re-averages over what is left."""
    if len(mask.active(kind, edge)) < 2:
        raise UsageError("removing the last operation of an edge is not a valid perturbation")
    return accuracy(weights, mask.without(kind, edge, op), x_val, y_val)


def score_edge(mask, kind, edge, weights, x_val, y_val, kind_in_use: bool = True) -> dict[str, float]:
    active = mask.active(kind, edge)
    if not kind_in_use:
        # no cell of this kind exists, so removing any op leaves the network unchanged
        base = accuracy(weights, mask, x_val, y_val)
        return {op: base for op in active}
    return {op: evaluate_without_op(mask, kind, edge, op, weights, x_val, y_val) for op in active}


def progressive_nas(
    mask: ArchMask,
    unsearched: list[int],
    t: int,
    schedule: SearchSchedule,
    rng: np.random.Generator,
    weights: ParamStore,
    x_val,
    y_val,
    client: int = 0,
    used_kinds=CELL_KINDS,
) -> tuple[ArchMask, list[int], list[SearchEvent]]:
    """One invocation of the searcher at round ``t``.

    Returns the (possibly) updated mask, the remaining unsearched edge
    indices and the events emitted. Both cell kinds are scored on the mask
    as it was before the event and finalized together.
    """
    if not schedule.fires(t, len(unsearched)):
        return mask, list(unsearched), []
    remaining = sorted(unsearched)
    edge = remaining.pop(int(rng.integers(len(remaining))))
    events = []
    choices = {}
    for kind in CELL_KINDS:
        active = mask.active(kind, edge)
        if len(active) == 1:
            choices[kind] = active[0]
            events.append(SearchEvent(t, client, kind, edge, {}, active[0], forced=True))
            continue
        scores = score_edge(mask, kind, edge, weights, x_val, y_val, kind in used_kinds)
        choices[kind] = select_operation(scores)
        events.append(SearchEvent(t, client, kind, edge, scores, choices[kind]))
    new_mask = mask
    for kind, op in choices.items():
        new_mask = new_mask.keep_only(kind, edge, op)
    return new_mask, remaining, events


@dataclass
class ProgressiveSearcher:
    """Trainer hook binding a schedule to a client's validation split."""

    schedule: SearchSchedule
    used_kinds: tuple[str, ...] = CELL_KINDS

    def __call__(self, client, t: int) -> list[SearchEvent]:
        x_val, y_val = client.data.val
        new_mask, remaining, events = progressive_nas(
            client.mask,
            client.unsearched,
            t,
            self.schedule,
            client.search_rng,
            client.local,
            x_val,
            y_val,
            client=client.cid,
            used_kinds=self.used_kinds,
        )
        client.apply_mask(new_mask)
        client.unsearched = remaining
        return events
