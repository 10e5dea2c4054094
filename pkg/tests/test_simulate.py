import csv
import io

import numpy as np
import pytest

from disco.forward import forward_model
from disco.latency import model_latency, per_node_costs
from disco.masks import (CommPlan, MaskError, mask_to_commplan, pattern_dense,
                         select_subrows)
from disco.simulate import (TRACE_CSV_HEADER, DistProtocolError,
                            max_relative_error, partition_weights,
                            run_distributed, simulate,
                            verify_against_centralized)

from conftest import make_system


def test_single_node_is_bit_exact(toy_model, toy_weights, rng):
    x = rng.standard_normal((2, 1, 28, 28)).astype(np.float32)
    got, trace = simulate(toy_model, toy_weights, None, x, make_system(nodes=1))
    want = forward_model(toy_model, toy_weights, x)
    np.testing.assert_array_equal(got, want)
    assert all(r.bytes_out == 0 and r.bytes_in == 0 for r in trace.rows)


@pytest.mark.parametrize("nodes", [2, 4])
@pytest.mark.parametrize("q", [0.0, 0.5, 0.9, 1.0])
def test_distributed_matches_centralized(toy_model, toy_weights, rng, nodes, q):
    mask = select_subrows(toy_model, toy_weights, nodes, q)
    x = rng.standard_normal((2, 1, 28, 28)).astype(np.float32)
    got, _ = simulate(toy_model, toy_weights, mask, x, make_system(nodes=nodes))
    want = forward_model(toy_model, toy_weights, x, mask=mask)
    assert got.shape == want.shape
    assert max_relative_error(got, want) <= 1e-4


def test_node_visit_order_does_not_change_the_output(toy_model, toy_weights, rng):
    mask = select_subrows(toy_model, toy_weights, 4, 0.7)
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    system = make_system(nodes=4)
    outs = []
    traces = []
    for seed in (None, 0, 1, 42):
        out, trace = simulate(toy_model, toy_weights, mask, x, system,
                              node_order_seed=seed)
        outs.append(out)
        traces.append(sorted((r.layer_id, r.node, r.bytes_out, r.bytes_in, r.ops)
                             for r in trace.rows))
    for other in outs[1:]:
        np.testing.assert_array_equal(outs[0], other)
    for other in traces[1:]:
        assert traces[0] == other


def test_repeat_runs_are_bit_identical(toy_model, toy_weights, rng):
    mask = select_subrows(toy_model, toy_weights, 2, 0.5)
    x = rng.standard_normal((2, 1, 28, 28)).astype(np.float32)
    system = make_system(nodes=2)
    a, ta = simulate(toy_model, toy_weights, mask, x, system)
    b, tb = simulate(toy_model, toy_weights, mask, x, system)
    np.testing.assert_array_equal(a, b)
    assert ta.to_csv_text() == tb.to_csv_text()


def test_trace_equals_analytic_cost_table(toy_model, toy_weights, rng):
    """The simulator's tallies must reproduce the plan-based accounting."""
    mask = select_subrows(toy_model, toy_weights, 4, 0.6)
    plan = mask_to_commplan(mask, toy_model)
    system = make_system(nodes=4)
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    _, trace = simulate(toy_model, toy_weights, mask, x, system)

    want = {(c.layer_id, c.node): c
            for rows in per_node_costs(toy_model, plan, system).values()
            for c in rows}
    got = {(r.layer_id, r.node): r for r in trace.rows}
    assert set(got) == set(want)
    for key, r in got.items():
        w = want[key]
        assert (r.bytes_out, r.bytes_in, r.ops) == (w.bytes_out, w.bytes_in, w.ops)

    report = model_latency(toy_model, system, plan=plan)
    assert trace.total_comm_s == pytest.approx(
        sum(l.l_comm for l in report.layers), rel=1e-12)


def test_trace_csv_shape(toy_model, toy_weights, rng):
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    system = make_system(nodes=2)
    _, trace = simulate(toy_model, toy_weights, None, x, system)
    rows = list(csv.reader(io.StringIO(trace.to_csv_text())))
    assert rows[0] == TRACE_CSV_HEADER
    assert len(rows) == 1 + len(toy_model.layers) * 2
    for row in rows[1:]:
        out_b, in_b = int(row[2]), int(row[3])
        assert float(row[4]) == (out_b + in_b) / system.bandwidth_bytes_per_s


def test_shard_kernels_are_kept_kernels(toy_model, toy_weights):
    mask = select_subrows(toy_model, toy_weights, 2, 0.8)
    shards = partition_weights(toy_model, toy_weights, mask, 2)
    plan = mask_to_commplan(mask, toy_model)
    for shard in shards:
        for sl in shard.layers:
            layer = sl.layer
            if not layer.has_weights:
                assert sl.kernel is None
                continue
            lo, hi = sl.out_range
            full = toy_weights.kernel(layer.id)
            np.testing.assert_array_equal(
                sl.bias, toy_weights.bias(layer.id)[lo:hi])
            if sl.gather is None:
                np.testing.assert_array_equal(sl.kernel, full[lo:hi])
            else:
                np.testing.assert_array_equal(sl.kernel, full[lo:hi][:, sl.gather])
                own_lo, own_hi = sl.local_range
                received = plan.features_into(layer.id, shard.node)
                assert sl.gather.tolist() == sorted(
                    set(range(own_lo, own_hi)) | set(received))


def test_masked_simulation_differs_from_dense(toy_model, toy_weights, rng):
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    system = make_system(nodes=2)
    dense, _ = simulate(toy_model, toy_weights, None, x, system)
    mask = select_subrows(toy_model, toy_weights, 2, 0.9)
    sparse, _ = simulate(toy_model, toy_weights, mask, x, system)
    assert not np.array_equal(dense, sparse)


def test_sparser_masks_move_fewer_bytes(toy_model, toy_weights, rng):
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    system = make_system(nodes=2)
    totals = []
    for q in (0.0, 0.5, 1.0):
        mask = select_subrows(toy_model, toy_weights, 2, q)
        _, trace = simulate(toy_model, toy_weights, mask, x, system)
        totals.append(sum(r.bytes_out for r in trace.rows))
    assert totals[0] > totals[1] > totals[2]
    # fully independent branches exchange nothing on sparsifiable layers
    mask = select_subrows(toy_model, toy_weights, 2, 1.0)
    _, trace = simulate(toy_model, toy_weights, mask, x, system)
    sparsifiable = {l.id for l in toy_model.sparsifiable_layers}
    for r in trace.rows:
        if r.layer_id in sparsifiable:
            assert r.bytes_out == 0 and r.bytes_in == 0


def test_verify_against_centralized_is_tight(toy_model, toy_weights):
    mask = select_subrows(toy_model, toy_weights, 2, 0.5)
    err = verify_against_centralized(toy_model, toy_weights, mask,
                                     make_system(nodes=2), trials=2, batch=2)
    assert err <= 1e-4


def test_max_relative_error_definition():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([1.0, 2.0, 4.0])
    assert max_relative_error(a, b) == pytest.approx(0.25)
    assert max_relative_error(b, b) == 0.0
    zeros = np.zeros(3)
    assert max_relative_error(a, zeros) == 3.0  # absolute fallback


def test_mismatched_nodes_are_rejected(toy_model, toy_weights, rng):
    mask = select_subrows(toy_model, toy_weights, 2, 0.5)
    with pytest.raises(MaskError, match="nodes"):
        partition_weights(toy_model, toy_weights, mask, 4)
    shards = partition_weights(toy_model, toy_weights, mask, 2)
    plan = mask_to_commplan(mask, toy_model)
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    with pytest.raises(MaskError, match="plan built for"):
        run_distributed(toy_model, shards[:1], plan, x, make_system(nodes=1))
    with pytest.raises(ValueError, match="shape"):
        run_distributed(toy_model, shards, plan,
                        np.zeros((1, 1, 27, 27), np.float32), make_system(nodes=2))


def test_unfulfillable_plan_raises_protocol_error(toy_model, toy_weights, rng):
    """A plan entry on the replicated first layer promises arrivals no node
    sends; the receive barrier must catch the contradiction."""
    nodes = 2
    mask = pattern_dense(toy_model, nodes)
    shards = partition_weights(toy_model, toy_weights, mask, nodes)
    plan = mask_to_commplan(mask, toy_model)
    plan.pairs[0] = {(0, 1): (0,)}
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    with pytest.raises(DistProtocolError, match="channel is empty"):
        run_distributed(toy_model, shards, plan, x, make_system(nodes=nodes))


def test_commplan_rejects_wrong_node_count(toy_model, toy_weights):
    mask = select_subrows(toy_model, toy_weights, 2, 0.5)
    plan = CommPlan(4, mask_to_commplan(mask, toy_model).pairs)
    with pytest.raises(MaskError):
        run_distributed(toy_model,
                        partition_weights(toy_model, toy_weights, mask, 2),
                        plan, np.zeros((1, 1, 28, 28), np.float32),
                        make_system(nodes=2))
