import math

import numpy as np
import pydot
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiderfl import autodiff as ad
from spiderfl.errors import DimensionError, UsageError
from spiderfl.search_space import (
    CELL_KINDS,
    EDGES,
    NUM_EDGES,
    PRIMITIVES,
    ArchMask,
    SupernetSpec,
    build_supernet,
    count_activations,
    count_flops,
    count_params,
    edge_owner,
    export_dot,
    forward,
    mask_weights,
    network_plan,
)

TINY = SupernetSpec(num_cells=2, init_channels=4, num_classes=3, input_shape=(3, 6, 6))
ONE_CELL = SupernetSpec(num_cells=1, init_channels=2, num_classes=2, input_shape=(3, 5, 5))


def random_mask(rng, ops=PRIMITIVES):
    mats = []
    for _ in CELL_KINDS:
        m = rng.random((NUM_EDGES, len(PRIMITIVES))) < 0.4
        m[:, [i for i, op in enumerate(PRIMITIVES) if op not in ops]] = False
        for e in range(NUM_EDGES):
            if not m[e].any():
                m[e, PRIMITIVES.index(ops[rng.integers(len(ops))])] = True
        mats.append(m)
    return ArchMask(*mats)


def uniform_mask(op):
    return ArchMask.single([op] * NUM_EDGES, [op] * NUM_EDGES)


# per-op parameter table written out by hand, independent of the layer plan
def op_params(op, c, stride):
    return {
        "none": 0,
        "skip_connect": 0 if stride == 1 else c * c,
        "max_pool_3x3": 0,
        "avg_pool_3x3": 0,
        "sep_conv_3x3": 2 * (9 * c + c * c),
        "sep_conv_5x5": 2 * (25 * c + c * c),
        "dil_conv_3x3": 9 * c + c * c,
        "dil_conv_5x5": 25 * c + c * c,
    }[op]


def hand_count(spec, mask):
    """Closed-form parameter count: stem + per-cell preprocessing + active ops + classifier."""
    c0 = spec.init_channels
    total = 3 * c0 * spec.input_shape[0] * 9
    c_pp = c_p = 3 * c0
    c = c0
    for kind in spec.cell_kinds:
        if kind == "reduce":
            c *= 2
        total += c * c_pp + c * c_p  # two 1x1 preprocessing convs (or the factorized pair)
        for e, (_, src) in enumerate(EDGES):
            stride = 2 if kind == "reduce" and src < 2 else 1
            total += sum(op_params(op, c, stride) for op in mask.active(kind, e))
        c_pp, c_p = c_p, 4 * c
    return total + c_p * spec.num_classes + spec.num_classes


# -- construction ------------------------------------------------------------


def test_default_layout_matches_darts():
    spec = SupernetSpec()
    assert spec.cell_kinds == ("normal", "normal", "reduce", "normal", "normal", "reduce", "normal", "normal")
    assert NUM_EDGES == 14


def test_build_is_deterministic():
    a, b = build_supernet(TINY, 7), build_supernet(TINY, 7)
    assert a.names() == b.names()
    assert a.checksum() == b.checksum()
    assert build_supernet(TINY, 8).checksum() != a.checksum()


def test_full_scale_parameter_count():
    n = count_params(ArchMask.full(), SupernetSpec())
    assert abs(n - 1.9e6) <= 0.15 * 1.9e6


@pytest.mark.parametrize("spec", [TINY, ONE_CELL, SupernetSpec(num_cells=3, init_channels=2, input_shape=(3, 7, 7))])
def test_parameter_count_matches_closed_form(spec):
    full = ArchMask.full()
    assert count_params(full, spec) == hand_count(spec, full)
    assert build_supernet(spec, 0).num_scalars() == count_params(full, spec)


def test_random_masks_match_per_op_table():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = random_mask(rng)
        assert count_params(m, TINY) == hand_count(TINY, m)


def test_param_free_mask_counts_only_shared_parts():
    rng = np.random.default_rng(1)
    none_only = uniform_mask("none")
    for _ in range(5):
        m = random_mask(rng, ops=("none", "max_pool_3x3", "avg_pool_3x3"))
        assert count_params(m, TINY) == count_params(none_only, TINY)
    # stride-1 skip is free too; normal cells only
    assert count_params(uniform_mask("skip_connect"), ONE_CELL) == count_params(none_only, ONE_CELL)


# -- masks -------------------------------------------------------------------


def test_mask_requires_an_op_per_edge():
    m = np.zeros((NUM_EDGES, len(PRIMITIVES)), dtype=bool)
    with pytest.raises(UsageError):
        ArchMask(m, m)


def test_mask_serialization_round_trip():
    m = random_mask(np.random.default_rng(3))
    assert ArchMask.loads(m.dumps()) == m
    doc = m.to_dict()
    assert set(doc) == set(CELL_KINDS)
    assert set(doc["normal"]) == {str(e) for e in range(NUM_EDGES)}


def test_keep_only_and_without():
    full = ArchMask.full()
    m = full.keep_only("normal", 3, "sep_conv_3x3")
    assert m.is_finalized("normal", 3) and m.active("normal", 3) == ("sep_conv_3x3",)
    assert m.is_subset_of(full) and not full.is_subset_of(m)
    m2 = m.without("reduce", 0, "none")
    assert "none" not in m2.active("reduce", 0)
    with pytest.raises(UsageError):
        m.without("normal", 3, "none")


# -- mask_weights ------------------------------------------------------------


def test_mask_weights_full_is_identity_and_idempotent():
    w = build_supernet(TINY, 0)
    full = mask_weights(w, ArchMask.full())
    assert full.names() == w.names()
    m = random_mask(np.random.default_rng(4))
    once = mask_weights(w, m)
    assert mask_weights(once, m).names() == once.names()


def test_mask_weights_single_op_name_enumeration():
    w = build_supernet(TINY, 0)
    normal = ["none"] * NUM_EDGES
    normal[5] = "sep_conv_3x3"
    m = ArchMask.single(normal, ["none"] * NUM_EDGES)
    got = set(mask_weights(w, m).names())
    shared = {n for n in w.names() if edge_owner(n) is None}
    # hand enumeration: cell 0 is the only normal cell of TINY
    expected = shared | {f"cell0/normal/e05/sep_conv_3x3/{layer}" for layer in ("dw1", "pw1", "dw2", "pw2")}
    assert got == expected


def test_mask_weights_rejects_missing_entries():
    w = build_supernet(TINY, 0)
    small = mask_weights(w, uniform_mask("none"))
    with pytest.raises(UsageError):
        mask_weights(small, ArchMask.full())


# -- forward -----------------------------------------------------------------


def test_forward_shapes_and_reduction_geometry():
    spec = SupernetSpec(num_cells=3, init_channels=2, num_classes=4, input_shape=(3, 7, 7), reduction_cells=(1,))
    w = build_supernet(spec, 0)
    trace = []
    x = np.random.default_rng(0).random((2, 3, 7, 7)).astype(np.float32)
    logits = forward(w, ArchMask.full(), x, trace=trace)
    assert logits.shape == (2, 4)
    shapes = {name: shape for name, shape, _ in trace}
    assert shapes["cell0/normal/out"] == (8, 7, 7)
    assert shapes["cell1/reduce/out"] == (16, 4, 4)  # channels double, spatial halves (ceil)
    assert shapes["cell2/normal/out"] == (16, 4, 4)


def test_forward_input_shape_checked():
    w = build_supernet(TINY, 0)
    with pytest.raises(DimensionError):
        forward(w, ArchMask.full(), np.zeros((2, 3, 5, 5), dtype=np.float32))


def test_single_op_mask_is_the_plain_child():
    rng = np.random.default_rng(5)
    w = build_supernet(TINY, 1)
    ops_n = [PRIMITIVES[i] for i in rng.integers(0, len(PRIMITIVES), NUM_EDGES)]
    ops_r = [PRIMITIVES[i] for i in rng.integers(0, len(PRIMITIVES), NUM_EDGES)]
    m = ArchMask.single(ops_n, ops_r)
    x = rng.random((4, 3, 6, 6)).astype(np.float32)
    child = mask_weights(w, m).copy()
    np.testing.assert_array_equal(forward(w, m, x).data, forward(child, m, x).data)


def test_mixed_edge_counts_none_in_the_divisor():
    from spiderfl.search_space import _Runner, mixed_edge

    run = _Runner(build_supernet(ONE_CELL, 0), 1e-5)
    x = ad.Tensor(np.random.default_rng(1).random((2, 2, 5, 5)))
    half = mixed_edge(run, "cell0/normal/e00", ("none", "skip_connect"), x, 1)
    np.testing.assert_array_equal(half.data, x.data / 2)
    third = mixed_edge(run, "cell0/normal/e00", ("none", "skip_connect", "max_pool_3x3"), x, 1)
    pooled = run.op("cell0/normal/e00/max_pool_3x3", "max_pool_3x3", x, 1).data
    np.testing.assert_allclose(third.data, (x.data + pooled) / 3, rtol=1e-12)
    assert mixed_edge(run, "cell0/normal/e00", ("none",), x, 1) is None


def per_edge_oracle(w, spec, mask, x):
    """Independent per-edge loop: every edge output is sum(active op outputs) / |active|."""
    from spiderfl.search_space import _Runner

    run = _Runner(w, spec.bn_eps)
    s = run.bn("stem/bn", run.conv("stem/conv", ad.Tensor(x), padding=1))
    s0 = s1 = s
    for cell in spec.layout():
        p = cell.prefix
        t0 = (run.factorized_reduce if cell.reduction_prev else run.relu_conv_bn)(f"{p}/pre0", s0)
        t1 = run.relu_conv_bn(f"{p}/pre1", s1)
        states = [t0.data, t1.data]
        for j in range(4):
            node = np.zeros((x.shape[0], cell.c, *cell.sp_out))
            for src in range(j + 2):
                e = [i for i, (jj, ss) in enumerate(EDGES) if jj == j and ss == src][0]
                stride = 2 if cell.kind == "reduce" and src < 2 else 1
                active = mask.active(cell.kind, e)
                total = np.zeros_like(node)
                for op in active:
                    y = run.op(f"{p}/e{e:02d}/{op}", op, ad.Tensor(states[src]), stride)
                    if y is not None:
                        total = total + y.data
                node = node + total / len(active)
            states.append(node)
        s0, s1 = s1, ad.Tensor(np.concatenate(states[2:], axis=1))
    pooled = s1.data.mean(axis=(2, 3))
    return pooled @ w["classifier/weight"].data.T + w["classifier/bias"].data


def test_full_mask_matches_per_edge_averaging_oracle():
    w = build_supernet(TINY, 3)
    w64 = w.replace({k: v.astype(np.float64) for k, v in w.arrays().items()})
    x = np.random.default_rng(2).random((3, 3, 6, 6))
    for mask in (ArchMask.full(), random_mask(np.random.default_rng(9))):
        got = forward(w64, mask, x).data
        np.testing.assert_allclose(got, per_edge_oracle(w64, TINY, mask, x), rtol=1e-9, atol=1e-10)


def test_one_cell_brute_force_mixture():
    w = build_supernet(ONE_CELL, 4)
    w64 = w.replace({k: v.astype(np.float64) for k, v in w.arrays().items()})
    x = np.random.default_rng(3).random((4, 3, 5, 5))
    mask = random_mask(np.random.default_rng(11))
    np.testing.assert_allclose(forward(w64, mask, x).data, per_edge_oracle(w64, ONE_CELL, mask, x), rtol=1e-9, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_inactive_weights_do_not_affect_output(seed):
    rng = np.random.default_rng(seed)
    w = build_supernet(TINY, 0)
    ops = lambda: [PRIMITIVES[i] for i in rng.integers(0, len(PRIMITIVES), NUM_EDGES)]  # noqa: E731
    m = ArchMask.single(ops(), ops())
    active = set(mask_weights(w, m).names())
    perturbed = w.replace(
        {k: (v if k in active else v + rng.normal(size=v.shape).astype(v.dtype)) for k, v in w.arrays().items()}
    )
    x = rng.random((2, 3, 6, 6)).astype(np.float32)
    assert forward(w, m, x).data.tobytes() == forward(perturbed, m, x).data.tobytes()


# -- FLOPs and activations ---------------------------------------------------


def test_single_conv_mac_formula():
    # 3x3 conv, 16 -> 16 channels, 32x32, pad 1: 9 * 16 * 16 * 32 * 32 MACs
    k = ad.Tensor(np.zeros((16, 16, 3, 3), dtype=np.float32))
    x = ad.Tensor(np.zeros((1, 16, 32, 32), dtype=np.float32))
    from spiderfl.search_space import _Runner
    from spiderfl.params import ParamStore

    trace = []
    _Runner(ParamStore({"c": k}), 1e-5, trace).conv("c", x, padding=1)
    assert trace[0][2] == 9 * 16 * 16 * 32 * 32 == 2_359_296


def shared_flops(spec):
    return count_flops(uniform_mask("none"), spec)


def test_skip_only_mask_costs_shared_parts_only():
    assert count_flops(uniform_mask("skip_connect"), ONE_CELL) == shared_flops(ONE_CELL)
    assert count_flops(uniform_mask("max_pool_3x3"), TINY) == shared_flops(TINY)


def test_trace_agrees_with_static_plan():
    rng = np.random.default_rng(6)
    for spec in (TINY, ONE_CELL):
        w = build_supernet(spec, 0)
        for mask in (ArchMask.full(), random_mask(rng), uniform_mask("none")):
            trace = []
            forward(w, mask, rng.random((2, *spec.input_shape)).astype(np.float32), trace=trace)
            walked = {name: (shape, macs) for name, shape, macs in trace}
            planned = {l.name: (l.out_shape, l.macs) for l in network_plan(spec, mask)}
            assert walked == planned
            assert sum(m for _, _, m in trace) == count_flops(mask, spec)
            assert sum(math.prod(s) for _, s, _ in trace) == count_activations(mask, spec)


def test_full_scale_flops_reported():
    flops = count_flops(ArchMask.full(), SupernetSpec())
    assert 200e6 < flops < 400e6  # reference figure 319M uses an unstated convention


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_costs_shrink_with_the_mask(seed):
    rng = np.random.default_rng(seed)
    m = random_mask(rng)
    kind = CELL_KINDS[rng.integers(2)]
    e = int(rng.integers(NUM_EDGES))
    active = m.active(kind, e)
    smaller = m.keep_only(kind, e, active[rng.integers(len(active))])
    assert smaller.is_subset_of(m)
    assert count_params(smaller, TINY) <= count_params(m, TINY)
    assert count_flops(smaller, TINY) <= count_flops(m, TINY)
    assert count_flops(m, TINY) <= count_flops(ArchMask.full(), TINY)


# -- DOT ---------------------------------------------------------------------


def labeled_edges(graph):
    return [e for e in graph.get_edges() if e.get("label") is not None]


def test_dot_finalized_has_fourteen_labeled_edges_per_cell():
    rng = np.random.default_rng(7)
    ops = lambda: [PRIMITIVES[i] for i in rng.integers(0, len(PRIMITIVES), NUM_EDGES)]  # noqa: E731
    graphs = pydot.graph_from_dot_data(export_dot(ArchMask.single(ops(), ops())))
    assert [g.get_name() for g in graphs] == list(CELL_KINDS)
    for g in graphs:
        assert len(labeled_edges(g)) == NUM_EDGES


def test_dot_full_mask_has_every_op():
    for g in pydot.graph_from_dot_data(export_dot(ArchMask.full())):
        assert len(labeled_edges(g)) == NUM_EDGES * len(PRIMITIVES)


def test_dot_parses_for_random_masks():
    rng = np.random.default_rng(8)
    for _ in range(5):
        m = random_mask(rng)
        graphs = pydot.graph_from_dot_data(export_dot(m))
        assert graphs is not None and len(graphs) == 2
        for kind, g in zip(CELL_KINDS, graphs):
            labels = sorted(e.get("label").strip('"') for e in labeled_edges(g))
            expected = sorted(op for e in range(NUM_EDGES) for op in m.active(kind, e))
            assert labels == expected
