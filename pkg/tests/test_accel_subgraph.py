"""The fused conv pipeline against the reference operator composition.

Every configuration the network uses (bare conv, conv+pool+shift, conv+shift,
conv+shuffle) must produce byte-identical tensors under both schedulers, with
traffic counters that match closed-form expectations.
"""
import numpy as np
import pytest

from conftest import make_tiny_spec, random_input

from diracdelta.accel.subgraph import (
    SimulatorExecutor,
    TileSchedule,
    pool_pass,
    run_subgraph,
    shift_pass,
)
from diracdelta.bundle import random_bundle
from diracdelta.errors import ShapeError
from diracdelta.net import ReferenceExecutor, forward
from diracdelta.ops import (
    concat_shuffle,
    conv1x1_ref,
    default_shift_directions,
    maxpool2x2,
    shift,
)
from diracdelta.quant import LayerQuantParams, NetworkQuantParams, build_threshold_table
from diracdelta.tensor import ACC_LIMIT, FeatureMap, WeightMatrix, blocked_channel_count


def _table(seed):
    rng = np.random.default_rng(seed)
    p = LayerQuantParams(alpha=float(rng.uniform(0.5, 1.5)), weight_scale=1 / 15)
    return build_threshold_table(p, NetworkQuantParams(s=1.0))


def _random_case(seed, h, w, ic, oc):
    rng = np.random.default_rng(seed)
    fm = FeatureMap.from_array(rng.integers(0, 16, size=(h, w, ic), dtype=np.uint8))
    wm = WeightMatrix(oc, ic, rng.integers(0, 16, size=(oc, ic), dtype=np.uint8))
    return fm, wm, _table(seed + 1)


def _reference(fm, wm, table, pool=False, shift_dirs=None, shuffle_with=None):
    out = FeatureMap.from_array(table.apply(conv1x1_ref(fm, wm)))
    if pool:
        out = maxpool2x2(out)
    if shift_dirs is not None:
        out = shift(out, shift_dirs)
    if shuffle_with is not None:
        out = concat_shuffle(shuffle_with, out)
    return out


# =========================================================================
# bit-exactness over fused configurations
# =========================================================================

FUSED_CASES = [
    # (h, w, ic, oc, pool, shifted, shuffled) covering every fusion the graph uses
    (8, 8, 3, 16, True, True, False),     # stem-like, padded input channels
    (6, 6, 8, 16, True, True, False),     # downsample residual first conv
    (4, 4, 16, 8, False, False, True),    # residual second conv + shuffle
    (4, 4, 8, 16, False, True, False),    # basic block first conv
    (5, 5, 7, 9, False, False, False),    # bare conv, nothing fused
    (4, 6, 5, 12, True, False, False),    # non-square with pooling
    (3, 3, 33, 40, False, False, False),  # both channel counts straddle a tile
]


@pytest.mark.parametrize("h,w,ic,oc,pool,shifted,shuffled", FUSED_CASES)
def test_pipeline_matches_reference_composition(h, w, ic, oc, pool, shifted, shuffled):
    fm, wm, table = _random_case(h * 1000 + w * 100 + ic, h, w, ic, oc)
    dirs = default_shift_directions(oc) if shifted else None
    skip = None
    if shuffled:
        rng = np.random.default_rng(99)
        out_h, out_w = (h // 2, w // 2) if pool else (h, w)
        skip = FeatureMap.from_array(
            rng.integers(0, 16, size=(out_h, out_w, oc), dtype=np.uint8)
        )
    got = run_subgraph(fm, wm, table, pool=pool, shift_dirs=dirs, shuffle_with=skip)
    want = _reference(fm, wm, table, pool=pool, shift_dirs=dirs, shuffle_with=skip)
    assert got.output == want


@pytest.mark.parametrize("scheduler", ["single-thread", "concurrent"])
def test_both_schedulers_compute_identical_bytes(scheduler):
    fm, wm, table = _random_case(7, 8, 8, 5, 24)
    dirs = default_shift_directions(24)
    got = run_subgraph(fm, wm, table, pool=True, shift_dirs=dirs, scheduler=scheduler)
    want = _reference(fm, wm, table, pool=True, shift_dirs=dirs)
    assert got.output == want


def test_schedulers_agree_on_stats_too():
    fm, wm, table = _random_case(21, 6, 6, 40, 24)
    a = run_subgraph(fm, wm, table, scheduler="single-thread")
    b = run_subgraph(fm, wm, table, scheduler="concurrent")
    assert a.output == b.output
    assert a.stats.dram_read_bytes == b.stats.dram_read_bytes
    assert a.stats.dram_write_bytes == b.stats.dram_write_bytes
    assert a.stats.max_abs_acc == b.stats.max_abs_acc


def test_small_tiles_and_unit_fifo_capacity_still_bit_exact():
    fm, wm, table = _random_case(31, 6, 6, 20, 12)
    schedule = TileSchedule(ic=8, oc=8, fifo_capacity=1)
    got = run_subgraph(fm, wm, table, schedule)
    assert got.output == _reference(fm, wm, table)
    assert all(d <= 1 for d in got.stats.fifo_depths.values())


# =========================================================================
# traffic and pressure accounting
# =========================================================================

def test_traffic_counters_follow_closed_forms():
    fm, wm, table = _random_case(41, 6, 4, 33, 40)
    res = run_subgraph(fm, wm, table)
    s = res.stats
    # weights: 33 -> 64 and 40 -> 64 padded, two codes per byte
    assert s.weight_bytes == 64 * 64 // 2
    assert s.dram_read_bytes == 6 * 4 * blocked_channel_count(33) // 2 + s.weight_bytes
    assert s.dram_write_bytes == 6 * 4 * blocked_channel_count(40) // 2
    assert s.memcpy_bytes == 0


def test_shuffle_doubles_the_stored_channels_and_counts_the_copy():
    fm, wm, table = _random_case(43, 4, 4, 16, 8)
    rng = np.random.default_rng(44)
    skip = FeatureMap.from_array(rng.integers(0, 16, size=(4, 4, 8), dtype=np.uint8))
    res = run_subgraph(fm, wm, table, shuffle_with=skip)
    assert res.output.channels == 16
    assert res.stats.memcpy_bytes == 4 * 4 * 8 // 2
    assert res.stats.dram_write_bytes == 4 * 4 * blocked_channel_count(16) // 2


def test_accumulator_peak_matches_reference_and_respects_bound():
    fm, wm, table = _random_case(47, 5, 5, 48, 24)
    res = run_subgraph(fm, wm, table)
    want_peak = int(np.abs(conv1x1_ref(fm, wm)).max())
    assert res.stats.max_abs_acc == want_peak
    assert res.stats.max_abs_acc <= ACC_LIMIT


def test_lane_occupancy_is_reported():
    fm, wm, table = _random_case(53, 8, 8, 3, 16)
    res = run_subgraph(fm, wm, table, pool=True,
                       shift_dirs=default_shift_directions(16))
    assert res.stats.pool_occupancy == 8 + 1
    # shift runs at the pooled width, over the padded channel block
    assert res.stats.shift_occupancy <= 2 * (4 + 2) + 2
    assert set(res.stats.fifo_depths) == {
        "loader_to_conv", "conv_to_convert", "convert_to_next",
        "pool_to_next", "shift_to_store",
    }
    assert all(d <= 2 for d in res.stats.fifo_depths.values())


def test_fifo_depths_respect_configured_capacity():
    fm, wm, table = _random_case(59, 4, 4, 8, 8)
    res = run_subgraph(fm, wm, table, TileSchedule(fifo_capacity=3))
    assert all(d <= 3 for d in res.stats.fifo_depths.values())


# =========================================================================
# degenerate inputs
# =========================================================================

def test_zero_weights_produce_the_zero_accumulator_code_everywhere():
    """Code-0 weights are all -15, so accumulators are never positive."""
    rng = np.random.default_rng(61)
    fm = FeatureMap.from_array(rng.integers(0, 16, size=(4, 4, 10), dtype=np.uint8))
    wm = WeightMatrix(6, 10, np.zeros((6, 10), dtype=np.uint8))
    table = _table(62)
    res = run_subgraph(fm, wm, table)
    assert set(np.unique(res.output.to_array())) == {table.lookup(0)}
    assert table.lookup(0) == 0


def test_zero_activations_produce_the_zero_accumulator_code():
    rng = np.random.default_rng(63)
    fm = FeatureMap.from_array(np.zeros((4, 4, 10), dtype=np.uint8))
    wm = WeightMatrix(6, 10, rng.integers(0, 16, size=(6, 10), dtype=np.uint8))
    table = _table(64)
    res = run_subgraph(fm, wm, table)
    assert set(np.unique(res.output.to_array())) == {table.lookup(0)}


def test_shape_guards():
    fm, wm, table = _random_case(67, 4, 4, 8, 8)
    bad = WeightMatrix(8, 9, np.zeros((8, 9), dtype=np.uint8))
    with pytest.raises(ShapeError, match="input has 8 channels, weights expect 9"):
        run_subgraph(fm, bad, table)
    odd = FeatureMap.from_array(np.zeros((3, 4, 8), dtype=np.uint8))
    with pytest.raises(ShapeError, match="pooling needs even spatial dims"):
        run_subgraph(odd, wm, table, pool=True)
    with pytest.raises(ShapeError, match="3 shift directions for 8 channels"):
        run_subgraph(fm, wm, table, shift_dirs=default_shift_directions(3))


# =========================================================================
# standalone pool / shift passes
# =========================================================================

def test_pool_pass_matches_reference_with_traffic():
    rng = np.random.default_rng(71)
    fm = FeatureMap.from_array(rng.integers(0, 16, size=(8, 6, 20), dtype=np.uint8))
    res = pool_pass(fm)
    assert res.output == maxpool2x2(fm)
    assert res.stats.dram_read_bytes == 8 * 6 * blocked_channel_count(20) // 2
    assert res.stats.dram_write_bytes == 4 * 3 * blocked_channel_count(20) // 2
    assert res.stats.pool_occupancy == 6 + 1
    with pytest.raises(ShapeError, match="even spatial dims"):
        pool_pass(FeatureMap.from_array(np.zeros((3, 4, 2), dtype=np.uint8)))


def test_shift_pass_matches_reference_with_traffic():
    rng = np.random.default_rng(73)
    fm = FeatureMap.from_array(rng.integers(0, 16, size=(5, 7, 11), dtype=np.uint8))
    res = shift_pass(fm)
    assert res.output == shift(fm, default_shift_directions(11))
    assert res.stats.dram_read_bytes == res.stats.dram_write_bytes
    assert res.stats.shift_occupancy <= 2 * (7 + 2) + 2


# =========================================================================
# executor parity on whole networks
# =========================================================================

def test_simulator_forward_equals_reference_forward(tiny_bundle):
    fm = random_input(tiny_bundle.spec, seed=202)
    ref = forward(tiny_bundle, fm, executor=ReferenceExecutor())
    sim_ex = SimulatorExecutor()
    sim = forward(tiny_bundle, fm, executor=sim_ex)
    np.testing.assert_array_equal(ref.int_logits, sim.int_logits)
    np.testing.assert_array_equal(ref.logits, sim.logits)
    assert ref.class_index == sim.class_index


def test_simulator_logs_one_entry_per_engine_invocation(tiny_bundle):
    ex = SimulatorExecutor()
    forward(tiny_bundle, random_input(tiny_bundle.spec, seed=203), executor=ex)
    names = [name for name, _ in ex.log]
    assert names == [
        "conv1", "conv2",
        "pool", "shift", "s2d_skip_conv", "s2d_res_conv1", "s2d_res_conv2",
        "s2b0_res_conv1", "s2b0_res_conv2",
        "conv5",
    ]
    for _, stats in ex.log:
        assert stats.max_abs_acc <= ACC_LIMIT


def test_simulator_forward_concurrent_scheduler(tiny_bundle):
    fm = random_input(tiny_bundle.spec, seed=204)
    a = forward(tiny_bundle, fm, executor=SimulatorExecutor(scheduler="single-thread"))
    b = forward(tiny_bundle, fm, executor=SimulatorExecutor(scheduler="concurrent"))
    np.testing.assert_array_equal(a.int_logits, b.int_logits)


def test_simulator_runs_networks_with_asymmetric_stages(quant_params):
    spec = make_tiny_spec(input_size=24, stage_repeats=(2,))
    bundle = random_bundle(spec, quant_params, seed=205)
    fm = random_input(spec, seed=206)
    ref = forward(bundle, fm)
    sim = forward(bundle, fm, executor=SimulatorExecutor())
    np.testing.assert_array_equal(ref.int_logits, sim.int_logits)
