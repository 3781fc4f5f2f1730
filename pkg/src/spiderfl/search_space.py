"""DARTS-style supernet: cell layout, child-architecture masks, forward pass and cost accounting.

A network is a 3x3 stem, ``num_cells`` cells and a linear classifier. Every
cell has two input nodes, four intermediate nodes and an output node that
concatenates the intermediates, giving 14 edges. Each edge mixes the
operations that are active in the :class:`ArchMask` with equal weights.
Normal cells share one mask row-set and reduction cells another; weights are
per cell because channel counts differ between stages.

Cost accounting (parameters, MACs, activations) is derived from a static plan
of every layer, independent of the tensor code in :func:`forward`.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, UsageError
from .params import ParamStore

PRIMITIVES = (
    "none",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
OP_INDEX = {op: i for i, op in enumerate(PRIMITIVES)}
CELL_KINDS = ("normal", "reduce")
STEPS = 4


def _edge_sources(steps: int = STEPS) -> list[tuple[int, int]]:
    """``(node, source_state)`` per edge; states 0 and 1 are the cell inputs."""
    return [(j, s) for j in range(steps) for s in range(j + 2)]


EDGES = _edge_sources()
NUM_EDGES = len(EDGES)  # 2 + 3 + 4 + 5


def _half(size: int) -> int:
    return (size + 1) // 2


@dataclass(frozen=True)
class SupernetSpec:
    num_cells: int = 8
    init_channels: int = 16
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    # 0-indexed; None picks cells num_cells//3 and 2*num_cells//3
    reduction_cells: tuple[int, ...] | None = None
    stem_multiplier: int = 3
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_cells < 1 or self.init_channels < 1 or self.num_classes < 2:
            raise UsageError(f"invalid supernet spec {self}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise UsageError(f"input_shape must be (C, H, W), got {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.reduction_cells is not None:
            red = tuple(sorted(set(int(i) for i in self.reduction_cells)))
            if any(i < 0 or i >= self.num_cells for i in red):
                raise UsageError("reduction cell index out of range")
            object.__setattr__(self, "reduction_cells", red)

    @property
    def reduction_indices(self) -> tuple[int, ...]:
        if self.reduction_cells is not None:
            return self.reduction_cells
        n = self.num_cells
        if n >= 3:
            return (n // 3, 2 * n // 3)
        return (n - 1,) if n == 2 else ()

    @property
    def cell_kinds(self) -> tuple[str, ...]:
        red = set(self.reduction_indices)
        return tuple("reduce" if i in red else "normal" for i in range(self.num_cells))

    def used_kinds(self) -> set[str]:
        return set(self.cell_kinds)

    def layout(self) -> list["CellLayout"]:
        _, h, w = self.input_shape
        c_curr = self.stem_multiplier * self.init_channels
        c_pp, c_p, c_curr = c_curr, c_curr, self.init_channels
        sp_pp = sp_p = (h, w)
        reduction_prev = False
        cells = []
        for i, kind in enumerate(self.cell_kinds):
            reduce = kind == "reduce"
            if reduce:
                c_curr *= 2
            sp_out = (_half(sp_p[0]), _half(sp_p[1])) if reduce else sp_p
            cells.append(CellLayout(i, kind, reduction_prev, c_pp, c_p, c_curr, sp_pp, sp_p, sp_out))
            reduction_prev = reduce
            c_pp, c_p = c_p, STEPS * c_curr
            sp_pp, sp_p = sp_p, sp_out
        return cells

    def to_dict(self) -> dict:
        return {
            "num_cells": self.num_cells,
            "init_channels": self.init_channels,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "reduction_cells": None if self.reduction_cells is None else list(self.reduction_cells),
        }


class CellLayout(NamedTuple):
    index: int
    kind: str
    reduction_prev: bool
    c_pp: int
    c_p: int
    c: int
    sp0: tuple[int, int]
    sp1: tuple[int, int]
    sp_out: tuple[int, int]

    @property
    def prefix(self) -> str:
        return f"cell{self.index}/{self.kind}"

    def edge_geometry(self, edge: int) -> tuple[int, tuple[int, int]]:
        """``(stride, input spatial size)`` of the ops on ``edge``."""
        _, src = EDGES[edge]
        if src < 2:
            return (2 if self.kind == "reduce" else 1), self.sp1
        return 1, self.sp_out


# ---------------------------------------------------------------------------
# architecture masks


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=bool)
    if a.shape != (NUM_EDGES, len(PRIMITIVES)):
        raise UsageError(f"mask matrix must be {NUM_EDGES}x{len(PRIMITIVES)}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ArchMask:
    """Active operations per edge for normal and reduction cells."""

    normal: np.ndarray
    reduce: np.ndarray

    def __post_init__(self):
        for kind in CELL_KINDS:
            a = _readonly(getattr(self, kind))
            object.__setattr__(self, kind, a)
            empty = np.flatnonzero(~a.any(axis=1))
            if empty.size:
                raise UsageError(f"{kind} edge {int(empty[0])} has no active operation")

    @classmethod
    def full(cls, ops=PRIMITIVES) -> "ArchMask":
        row = np.zeros(len(PRIMITIVES), dtype=bool)
        for op in ops:
            row[OP_INDEX[op]] = True
        m = np.tile(row, (NUM_EDGES, 1))
        return cls(m, m.copy())

    @classmethod
    def single(cls, normal_ops, reduce_ops) -> "ArchMask":
        """Mask with exactly one op per edge, given as 14 op names per kind."""
        mats = []
        for ops in (normal_ops, reduce_ops):
            if len(ops) != NUM_EDGES:
                raise UsageError(f"need {NUM_EDGES} ops per cell kind")
            m = np.zeros((NUM_EDGES, len(PRIMITIVES)), dtype=bool)
            for e, op in enumerate(ops):
                m[e, OP_INDEX[op]] = True
            mats.append(m)
        return cls(*mats)

    def matrix(self, kind: str) -> np.ndarray:
        if kind not in CELL_KINDS:
            raise UsageError(f"unknown cell kind {kind!r}")
        return getattr(self, kind)

    def active(self, kind: str, edge: int) -> tuple[str, ...]:
        return tuple(PRIMITIVES[i] for i in np.flatnonzero(self.matrix(kind)[edge]))

    def is_finalized(self, kind: str, edge: int) -> bool:
        return int(self.matrix(kind)[edge].sum()) == 1

    def num_finalized(self, kind: str) -> int:
        return int((self.matrix(kind).sum(axis=1) == 1).sum())

    def fully_finalized(self) -> bool:
        return all(self.num_finalized(k) == NUM_EDGES for k in CELL_KINDS)

    def _with_row(self, kind: str, edge: int, row: np.ndarray) -> "ArchMask":
        mats = {k: self.matrix(k).copy() for k in CELL_KINDS}
        mats[kind][edge] = row
        return ArchMask(**mats)

    def keep_only(self, kind: str, edge: int, op: str) -> "ArchMask":
        if op not in self.active(kind, edge):
            raise UsageError(f"{op} is not active on {kind} edge {edge}")
        row = np.zeros(len(PRIMITIVES), dtype=bool)
        row[OP_INDEX[op]] = True
        return self._with_row(kind, edge, row)

    def without(self, kind: str, edge: int, op: str) -> "ArchMask":
        if op not in self.active(kind, edge):
            raise UsageError(f"{op} is not active on {kind} edge {edge}")
        row = self.matrix(kind)[edge].copy()
        row[OP_INDEX[op]] = False
        return self._with_row(kind, edge, row)

    def is_subset_of(self, other: "ArchMask") -> bool:
        return all(not (self.matrix(k) & ~other.matrix(k)).any() for k in CELL_KINDS)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchMask):
            return NotImplemented
        return all(np.array_equal(self.matrix(k), other.matrix(k)) for k in CELL_KINDS)

    def __hash__(self):
        return hash(tuple(self.matrix(k).tobytes() for k in CELL_KINDS))

    def to_dict(self) -> dict:
        return {k: {str(e): list(self.active(k, e)) for e in range(NUM_EDGES)} for k in CELL_KINDS}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchMask":
        mats = {}
        for kind in CELL_KINDS:
            m = np.zeros((NUM_EDGES, len(PRIMITIVES)), dtype=bool)
            rows = data[kind]
            if set(rows) != {str(e) for e in range(NUM_EDGES)}:
                raise UsageError(f"{kind}: expected edges 0..{NUM_EDGES - 1}")
            for e, ops in rows.items():
                for op in ops:
                    if op not in OP_INDEX:
                        raise UsageError(f"unknown operation {op!r}")
                    m[int(e), OP_INDEX[op]] = True
            mats[kind] = m
        return cls(**mats)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ArchMask":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# static layer plan


class Layer(NamedTuple):
    name: str
    params: tuple[tuple[str, tuple[int, ...]], ...]
    out_shape: tuple[int, ...]  # per sample
    macs: int


def _conv_layer(name, c_out, c_in_per_group, k, sp_out) -> Layer:
    shape = (c_out, c_in_per_group, k, k)
    return Layer(name, ((name, shape),), (c_out, *sp_out), math.prod(shape) * sp_out[0] * sp_out[1])


def _act(name, c, sp) -> Layer:
    return Layer(name, (), (c, *sp), 0)


def _relu_conv_bn_plan(prefix: str, c_in: int, c_out: int, sp) -> list[Layer]:
    return [_act(f"{prefix}/relu", c_in, sp), _conv_layer(f"{prefix}/conv", c_out, c_in, 1, sp), _act(f"{prefix}/bn", c_out, sp)]


def _factorized_reduce_plan(prefix: str, c_in: int, c_out: int, sp) -> list[Layer]:
    ca = c_out // 2
    out = (_half(sp[0]), _half(sp[1]))
    return [
        _act(f"{prefix}/relu", c_in, sp),
        _act(f"{prefix}/shift", c_in, sp),
        _conv_layer(f"{prefix}/fr_a", ca, c_in, 1, out),
        _conv_layer(f"{prefix}/fr_b", c_out - ca, c_in, 1, out),
        _act(f"{prefix}/concat", c_out, out),
        _act(f"{prefix}/bn", c_out, out),
    ]


def op_plan(prefix: str, op: str, c: int, stride: int, sp) -> list[Layer]:
    """Layers of one candidate operation on a ``c``-channel input of spatial size ``sp``."""
    out = sp if stride == 1 else (_half(sp[0]), _half(sp[1]))
    if op == "none":
        return []
    if op == "skip_connect":
        return [] if stride == 1 else _factorized_reduce_plan(prefix, c, c, sp)
    if op in ("max_pool_3x3", "avg_pool_3x3"):
        return [_act(f"{prefix}/pool", c, out), _act(f"{prefix}/bn", c, out)]
    if op in ("sep_conv_3x3", "sep_conv_5x5"):
        k = 3 if op == "sep_conv_3x3" else 5
        return [
            _act(f"{prefix}/relu1", c, sp),
            _conv_layer(f"{prefix}/dw1", c, 1, k, out),
            _conv_layer(f"{prefix}/pw1", c, c, 1, out),
            _act(f"{prefix}/bn1", c, out),
            _act(f"{prefix}/relu2", c, out),
            _conv_layer(f"{prefix}/dw2", c, 1, k, out),
            _conv_layer(f"{prefix}/pw2", c, c, 1, out),
            _act(f"{prefix}/bn2", c, out),
        ]
    if op in ("dil_conv_3x3", "dil_conv_5x5"):
        k = 3 if op == "dil_conv_3x3" else 5
        return [
            _act(f"{prefix}/relu", c, sp),
            _conv_layer(f"{prefix}/dw", c, 1, k, out),
            _conv_layer(f"{prefix}/pw", c, c, 1, out),
            _act(f"{prefix}/bn", c, out),
        ]
    raise UsageError(f"unknown operation {op!r}")


def network_plan(spec: SupernetSpec, mask: ArchMask) -> Iterator[Layer]:
    """Every layer the masked network executes for one sample, in forward order."""
    c_in, h, w = spec.input_shape
    c_stem = spec.stem_multiplier * spec.init_channels
    yield _act("input", c_in, (h, w))
    yield _conv_layer("stem/conv", c_stem, c_in, 3, (h, w))
    yield _act("stem/bn", c_stem, (h, w))
    cells = spec.layout()
    for cell in cells:
        p = cell.prefix
        if cell.reduction_prev:
            yield from _factorized_reduce_plan(f"{p}/pre0", cell.c_pp, cell.c, cell.sp0)
        else:
            yield from _relu_conv_bn_plan(f"{p}/pre0", cell.c_pp, cell.c, cell.sp0)
        yield from _relu_conv_bn_plan(f"{p}/pre1", cell.c_p, cell.c, cell.sp1)
        for e in range(NUM_EDGES):
            stride, sp = cell.edge_geometry(e)
            active = mask.active(cell.kind, e)
            for op in active:
                yield from op_plan(f"{p}/e{e:02d}/{op}", op, cell.c, stride, sp)
            if len(active) > 1:
                yield _act(f"{p}/e{e:02d}/mix", cell.c, cell.sp_out)
        for j in range(STEPS):
            yield _act(f"{p}/node{j}", cell.c, cell.sp_out)
        yield _act(f"{p}/out", STEPS * cell.c, cell.sp_out)
    c_last = STEPS * cells[-1].c
    yield _act("head/gap", c_last, ())
    k = spec.num_classes
    yield Layer("classifier", (("classifier/weight", (k, c_last)), ("classifier/bias", (k,))), (k,), k * c_last)


_EDGE_PARAM = re.compile(r"^cell\d+/(normal|reduce)/e(\d\d)/([a-z0-9_]+)/")


def edge_owner(name: str) -> tuple[str, int, str] | None:
    """``(kind, edge, op)`` for an edge-operation parameter, ``None`` for shared ones."""
    m = _EDGE_PARAM.match(name)
    if m is None:
        return None
    return m.group(1), int(m.group(2)), m.group(3)


def param_shapes(spec: SupernetSpec, mask: ArchMask) -> dict[str, tuple[int, ...]]:
    return {name: shape for layer in network_plan(spec, mask) for name, shape in layer.params}


def param_names(spec: SupernetSpec, mask: ArchMask) -> list[str]:
    return list(param_shapes(spec, mask))


def count_params(mask: ArchMask, spec: SupernetSpec) -> int:
    return int(sum(math.prod(s) for s in param_shapes(spec, mask).values()))


def count_flops(mask: ArchMask, spec: SupernetSpec, input_shape=None) -> int:
    """Multiply-accumulates for one sample; one MAC counts as one FLOP, parameter-free layers as zero."""
    if input_shape is not None and tuple(input_shape) != spec.input_shape:
        from dataclasses import replace

        spec = replace(spec, input_shape=tuple(input_shape))
    return int(sum(layer.macs for layer in network_plan(spec, mask)))


def count_activations(mask: ArchMask, spec: SupernetSpec) -> int:
    """Elements of every intermediate activation for a batch of one."""
    return int(sum(math.prod(layer.out_shape) for layer in network_plan(spec, mask)))


# ---------------------------------------------------------------------------
# parameters


def _init_array(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if name.endswith("/bias"):
        fan_in = shape[0] if len(shape) == 1 else math.prod(shape[1:])
        bound = 1.0 / math.sqrt(fan_in)
    else:
        fan_in = math.prod(shape[1:])
        bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(ad.DTYPE)


def build_supernet(spec: SupernetSpec, seed: int) -> ParamStore:
    """Kaiming-uniform (fan-in) weights for every operation of every edge, seeded per name."""
    shapes = param_shapes(spec, ArchMask.full())
    store = ParamStore.from_arrays({n: _init_array(n, s, seed) for n, s in shapes.items()}, spec)
    if store.num_scalars() != count_params(ArchMask.full(), spec):
        raise AssertionError("parameter store disagrees with the analytic count")
    return store


def mask_weights(w: ParamStore, mask: ArchMask, spec: SupernetSpec | None = None) -> ParamStore:
    """Entries of ``w`` used by ``mask``: active-op weights plus all shared weights."""
    spec = spec or w.spec
    if spec is None:
        raise UsageError("mask_weights needs a store built from a SupernetSpec")
    if w.spec is not None and w.spec != spec:
        raise UsageError("store was built for a different supernet spec")
    names = param_names(spec, mask)
    have = set(w.names())
    missing = [n for n in names if n not in have]
    if missing:
        raise UsageError(f"store lacks parameters required by the mask, e.g. {missing[0]}")
    return ParamStore({n: w[n] for n in names}, spec)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class _Runner:
    params: ParamStore
    eps: float
    trace: list | None = None

    def record(self, name: str, t: Tensor, macs: int = 0) -> Tensor:
        if self.trace is not None:
            self.trace.append((name, tuple(t.shape[1:]), macs))
        return t

    def conv(self, name, x, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
        k = self.params[name]
        out = ad.conv2d(x, k, stride=stride, padding=padding, dilation=dilation, groups=groups)
        f, cg, kh, kw = k.shape
        return self.record(name, out, f * cg * kh * kw * out.shape[2] * out.shape[3])

    def relu(self, name, x):
        return self.record(name, ad.relu(x))

    def bn(self, name, x):
        return self.record(name, ad.batch_norm(x, self.eps))

    def relu_conv_bn(self, prefix, x):
        x = self.relu(f"{prefix}/relu", x)
        x = self.conv(f"{prefix}/conv", x)
        return self.bn(f"{prefix}/bn", x)

    def factorized_reduce(self, prefix, x):
        x = self.relu(f"{prefix}/relu", x)
        shifted = self.record(f"{prefix}/shift", ad.shift(x))
        a = self.conv(f"{prefix}/fr_a", x, stride=2)
        b = self.conv(f"{prefix}/fr_b", shifted, stride=2)
        out = self.record(f"{prefix}/concat", ad.concat([a, b], axis=1))
        return self.bn(f"{prefix}/bn", out)

    def op(self, prefix: str, op: str, x: Tensor, stride: int) -> Tensor | None:
        if op == "none":
            return None
        if op == "skip_connect":
            return x if stride == 1 else self.factorized_reduce(prefix, x)
        if op in ("max_pool_3x3", "avg_pool_3x3"):
            kind = "max" if op == "max_pool_3x3" else "avg"
            y = self.record(f"{prefix}/pool", ad.pool2d(x, kind, 3, stride, 1))
            return self.bn(f"{prefix}/bn", y)
        if op in ("sep_conv_3x3", "sep_conv_5x5"):
            k = 3 if op == "sep_conv_3x3" else 5
            c = x.shape[1]
            y = self.relu(f"{prefix}/relu1", x)
            y = self.conv(f"{prefix}/dw1", y, stride=stride, padding=k // 2, groups=c)
            y = self.conv(f"{prefix}/pw1", y)
            y = self.bn(f"{prefix}/bn1", y)
            y = self.relu(f"{prefix}/relu2", y)
            y = self.conv(f"{prefix}/dw2", y, padding=k // 2, groups=c)
            y = self.conv(f"{prefix}/pw2", y)
            return self.bn(f"{prefix}/bn2", y)
        if op in ("dil_conv_3x3", "dil_conv_5x5"):
            k = 3 if op == "dil_conv_3x3" else 5
            c = x.shape[1]
            y = self.relu(f"{prefix}/relu", x)
            y = self.conv(f"{prefix}/dw", y, stride=stride, padding=k - 1, dilation=2, groups=c)
            y = self.conv(f"{prefix}/pw", y)
            return self.bn(f"{prefix}/bn", y)
        raise UsageError(f"unknown operation {op!r}")


def mixed_edge(run: _Runner, prefix: str, active, x: Tensor, stride: int) -> Tensor | None:
    """Uniform mixture of the active ops; ``None`` stands for an all-zero output."""
    outs = [y for y in (run.op(f"{prefix}/{op}", op, x, stride) for op in active) if y is not None]
    if len(active) == 1:
        return outs[0] if outs else None
    if not outs:
        return None
    return run.record(f"{prefix}/mix", ad.scale(ad.add_n(outs), 1.0 / len(active)))


def forward(
    params: ParamStore,
    mask: ArchMask,
    x,
    spec: SupernetSpec | None = None,
    trace: list | None = None,
) -> Tensor:
    """Logits of the masked network for a batch ``x`` of shape (N, C, H, W).

    ``params`` must contain at least :func:`mask_weights` of the mask. When
    ``trace`` is a list, ``(layer name, per-sample shape, MACs)`` is appended
    for every layer executed.
    """
    spec = spec or params.spec
    if spec is None:
        raise UsageError("forward needs a SupernetSpec")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match spec {spec.input_shape}")
    run = _Runner(params, spec.bn_eps, trace)
    run.record("input", x)
    s = run.conv("stem/conv", x, padding=1)
    s = run.bn("stem/bn", s)
    s0 = s1 = s
    for cell in spec.layout():
        p = cell.prefix
        if cell.reduction_prev:
            t0 = run.factorized_reduce(f"{p}/pre0", s0)
        else:
            t0 = run.relu_conv_bn(f"{p}/pre0", s0)
        t1 = run.relu_conv_bn(f"{p}/pre1", s1)
        states = [t0, t1]
        n = x.shape[0]
        edge = 0
        for j in range(STEPS):
            incoming = []
            for src in range(j + 2):
                stride = 2 if (cell.kind == "reduce" and src < 2) else 1
                y = mixed_edge(run, f"{p}/e{edge:02d}", mask.active(cell.kind, edge), states[src], stride)
                if y is not None:
                    incoming.append(y)
                edge += 1
            if incoming:
                node = ad.add_n(incoming)
            else:
                node = ad.zeros((n, cell.c, *cell.sp_out), dtype=x.dtype)
            states.append(run.record(f"{p}/node{j}", node))
        out = run.record(f"{p}/out", ad.concat(states[2:], axis=1))
        s0, s1 = s1, out
    pooled = run.record("head/gap", ad.global_avg_pool(s1))
    logits = ad.linear(pooled, params["classifier/weight"], params["classifier/bias"])
    c_last = pooled.shape[1]
    return run.record("classifier", logits, spec.num_classes * c_last)


def predict(params: ParamStore, mask: ArchMask, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per sample.

    Batch norm normalizes with the statistics of whatever batch it sees, so
    the split is cut into near-equal chunks of at most ``batch_size``.
    """
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    frozen = ParamStore({k: Tensor(t.data) for k, t in params.items()}, params.spec)
    chunks = np.array_split(np.asarray(x), -(-len(x) // batch_size))
    return np.concatenate([forward(frozen, mask, c).data.argmax(axis=1) for c in chunks])


def accuracy(params: ParamStore, mask: ArchMask, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy; an empty split scores 0."""
    if len(y) == 0:
        return 0.0
    return float((predict(params, mask, x, batch_size) == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# DOT export


def export_dot(mask: ArchMask) -> str:
    """One ``digraph`` per cell kind; every active op becomes a labeled edge."""
    names = ["c_{k-2}", "c_{k-1}"] + [str(j) for j in range(STEPS)]
    lines = []
    for kind in CELL_KINDS:
        lines.append(f"digraph {kind} {{")
        lines.append("  rankdir=LR;")
        lines.append('  node [shape=box, style=filled, fillcolor="#f0f0f0"];')
        for n in names + ["c_{k}"]:
            lines.append(f'  "{n}";')
        for e, (j, src) in enumerate(EDGES):
            for op in mask.active(kind, e):
                lines.append(f'  "{names[src]}" -> "{j}" [label="{op}"];')
        for j in range(STEPS):
            lines.append(f'  "{j}" -> "c_{{k}}" [style=dashed];')
        lines.append("}")
    return "\n".join(lines) + "\n"
