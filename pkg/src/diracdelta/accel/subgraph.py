"""Cycle-faithful functional model of the tiled conv pipeline.

One engine invocation runs a fused subgraph: load a blocked activation
tensor from DRAM, multiply-accumulate it against 32x32 weight tiles into an
output-stationary register file, re-quantize through the threshold
comparators, optionally pool and shift on the way out, and store the result
(optionally shuffled with a skip tensor) back to DRAM.

The stages are independent processes joined by bounded FIFOs carrying whole
rows, so the computed bytes are identical under any scheduler; what the
simulator adds over the reference operators is the traffic and occupancy
accounting of a real run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from ..net import ConvStep, ModelBundle
from ..ops import IDENTITY, default_shift_directions
from ..quant import ThresholdTable
from ..tensor import (
    ACC_DTYPE,
    DEFAULT_BLOCK,
    FeatureMap,
    WeightMatrix,
    blocked_channel_count,
    check_accumulators,
    to_blocked_layout,
    unpack,
)
from .fifo import FifoChannel, run_network
from .units import PoolLane, ShiftLane, shuffle_writeback


@dataclass(frozen=True)
class TileSchedule:
    """Tiling parameters of the engine: input/output channels per tile."""

    ic: int = DEFAULT_BLOCK
    oc: int = DEFAULT_BLOCK
    fifo_capacity: int = 2

    def __post_init__(self):
        if self.ic < 1 or self.oc < 1:
            raise ShapeError("tile sizes must be positive")
        if self.fifo_capacity < 1:
            raise ShapeError("fifo capacity must be >= 1")


@dataclass
class SubgraphStats:
    """Traffic and buffer pressure observed during one engine invocation."""

    dram_read_bytes: int = 0
    dram_write_bytes: int = 0
    weight_bytes: int = 0
    memcpy_bytes: int = 0
    max_abs_acc: int = 0
    pool_occupancy: int = 0
    shift_occupancy: int = 0
    fifo_depths: dict = field(default_factory=dict)


@dataclass
class SubgraphResult:
    output: FeatureMap
    stats: SubgraphStats


def _blocked_codes(fm: FeatureMap, block: int) -> np.ndarray:
    """Input tensor as the engine sees it: (blocks, H, W, block) code array."""
    nb = blocked_channel_count(fm.channels, block) // block
    buf = to_blocked_layout(fm, block)
    codes = unpack(buf, nb * fm.height * fm.width * block)
    return codes.reshape(nb, fm.height, fm.width, block)


def _weight_tiles(weights: WeightMatrix, schedule: TileSchedule):
    """Pad weights to whole tiles; returns (tiles, n_oc, n_ic, padded bytes).

    tiles[ob, ib] is the (oc, ic) block of signed effective weights. Padding
    rows and columns carry code 0; padded input channels are harmless since
    the corresponding activation codes are zero, and padded output channels
    are trimmed at the store stage.
    """
    oc_pad = blocked_channel_count(weights.out_channels, schedule.oc)
    ic_pad = blocked_channel_count(weights.in_channels, schedule.ic)
    codes = np.zeros((oc_pad, ic_pad), dtype=np.uint8)
    codes[: weights.out_channels, : weights.in_channels] = weights.codes
    eff = (2 * codes.astype(ACC_DTYPE)) - 15
    n_oc = oc_pad // schedule.oc
    n_ic = ic_pad // schedule.ic
    tiles = eff.reshape(n_oc, schedule.oc, n_ic, schedule.ic).transpose(0, 2, 1, 3)
    return tiles, n_oc, n_ic, oc_pad * ic_pad // 2


def _loader_stage(blocked: np.ndarray, out_fifo: FifoChannel):
    """Stream the input row by row, revisiting every channel block per row."""
    nb, h = blocked.shape[0], blocked.shape[1]
    for y in range(h):
        for b in range(nb):
            yield ("put", out_fifo, blocked[b, y])


def _conv_stage(tiles, n_ic, n_oc, height, width, oc_tile, real_oc, stats,
                in_fifo: FifoChannel, out_fifo: FifoChannel):
    """Output-stationary MACs: every pixel keeps all its output partials.

    The register file holds one row of pixels with the full padded output
    channel range each; input channel blocks arrive one after another and
    each one updates every output tile before the next block is consumed.
    """
    for _y in range(height):
        reg = np.zeros((width, n_oc * oc_tile), dtype=ACC_DTYPE)
        for ib in range(n_ic):
            row = yield ("get", in_fifo)
            acts = row.astype(np.float64)
            for ob in range(n_oc):
                prod = acts @ tiles[ob, ib].astype(np.float64).T
                reg[:, ob * oc_tile : (ob + 1) * oc_tile] += prod.astype(ACC_DTYPE)
        real = reg[:, :real_oc]
        check_accumulators(real)
        peak = int(np.abs(real).max()) if real.size else 0
        if peak > stats.max_abs_acc:
            stats.max_abs_acc = peak
        yield ("put", out_fifo, reg)


def _conversion_stage(table: ThresholdTable, height,
                      in_fifo: FifoChannel, out_fifo: FifoChannel):
    for _y in range(height):
        acc = yield ("get", in_fifo)
        yield ("put", out_fifo, table.apply(acc))


def _pool_stage(lane: PoolLane, height, in_fifo: FifoChannel, out_fifo: FifoChannel):
    for _y in range(height):
        row = yield ("get", in_fifo)
        for out in lane.feed_row(row):
            yield ("put", out_fifo, out)


def _shift_stage(lane: ShiftLane, height, in_fifo: FifoChannel, out_fifo: FifoChannel):
    for _y in range(height):
        row = yield ("get", in_fifo)
        for out in lane.feed_row(row):
            yield ("put", out_fifo, out)
    for out in lane.finish():
        yield ("put", out_fifo, out)


def _store_stage(height, in_fifo: FifoChannel, sink: list):
    for _y in range(height):
        row = yield ("get", in_fifo)
        sink.append(row)


def _padded_directions(real_channels: int, padded_channels: int, directions):
    dirs = list(directions)
    if len(dirs) != real_channels:
        raise ShapeError(f"{len(dirs)} shift directions for {real_channels} channels")
    dirs.extend([IDENTITY] * (padded_channels - real_channels))
    return tuple(dirs)


def run_subgraph(fm: FeatureMap, weights: WeightMatrix, table: ThresholdTable,
                 schedule: TileSchedule = TileSchedule(), *,
                 pool: bool = False, shift_dirs=None, shuffle_with: FeatureMap = None,
                 scheduler: str = "single-thread") -> SubgraphResult:
    """Run one conv subgraph through the pipeline model.

    ``shift_dirs`` enables the shift stage; ``shuffle_with`` supplies the
    skip half the output is concat-shuffled with at writeback. The output
    bytes equal what the reference operator composition produces; the stats
    describe the run.
    """
    if fm.channels != weights.in_channels:
        raise ShapeError(
            f"input has {fm.channels} channels, weights expect {weights.in_channels}"
        )
    if pool and (fm.height % 2 or fm.width % 2):
        raise ShapeError(
            f"pooling needs even spatial dims, got {fm.height}x{fm.width}"
        )
    stats = SubgraphStats()
    blocked = _blocked_codes(fm, schedule.ic)
    tiles, n_oc, n_ic, weight_bytes = _weight_tiles(weights, schedule)
    stats.weight_bytes = weight_bytes
    stats.dram_read_bytes = blocked.size // 2 + weight_bytes
    oc_pad = n_oc * schedule.oc
    real_oc = weights.out_channels

    h, w = fm.height, fm.width
    out_h, out_w = (h // 2, w // 2) if pool else (h, w)

    cap = schedule.fifo_capacity
    f_in = FifoChannel("loader_to_conv", cap)
    f_acc = FifoChannel("conv_to_convert", cap)
    fifos = [f_in, f_acc]
    stages = [
        _loader_stage(blocked, f_in),
        _conv_stage(tiles, n_ic, n_oc, h, w, schedule.oc, real_oc, stats, f_in, f_acc),
    ]
    pool_lane = PoolLane(w, oc_pad) if pool else None
    shift_lane = None
    if shift_dirs is not None:
        shift_lane = ShiftLane(out_w, oc_pad,
                               _padded_directions(real_oc, oc_pad, shift_dirs))

    f_codes = FifoChannel("convert_to_next", cap)
    fifos.append(f_codes)
    stages.append(_conversion_stage(table, h, f_acc, f_codes))
    tail = f_codes
    if pool_lane is not None:
        f_pool = FifoChannel("pool_to_next", cap)
        fifos.append(f_pool)
        stages.append(_pool_stage(pool_lane, h, tail, f_pool))
        tail = f_pool
    if shift_lane is not None:
        f_shift = FifoChannel("shift_to_store", cap)
        fifos.append(f_shift)
        stages.append(_shift_stage(shift_lane, out_h, tail, f_shift))
        tail = f_shift
    sink = []
    stages.append(_store_stage(out_h, tail, sink))

    run_network(stages, scheduler)

    assembled = np.stack(sink).reshape(out_h, out_w, oc_pad)[:, :, :real_oc]
    output = FeatureMap.from_array(assembled)
    if shuffle_with is not None:
        output, stats.memcpy_bytes = shuffle_writeback(output, shuffle_with)
    stats.dram_write_bytes = (
        blocked_channel_count(output.channels, schedule.ic)
        * output.height * output.width // 2
    )
    if pool_lane is not None:
        stats.pool_occupancy = pool_lane.max_occupancy
    if shift_lane is not None:
        stats.shift_occupancy = shift_lane.max_occupancy
    stats.fifo_depths = {f.name: f.max_depth for f in fifos}
    return SubgraphResult(output=output, stats=stats)


def pool_pass(fm: FeatureMap, schedule: TileSchedule = TileSchedule()):
    """Standalone pooling of a stored tensor (the downsample skip path)."""
    if fm.height % 2 or fm.width % 2:
        raise ShapeError(f"pooling needs even spatial dims, got {fm.height}x{fm.width}")
    arr = fm.to_array()
    lane = PoolLane(fm.width, fm.channels)
    rows = []
    for y in range(fm.height):
        rows.extend(lane.feed_row(arr[y]))
    out = FeatureMap.from_array(np.stack(rows))
    stats = SubgraphStats(
        dram_read_bytes=blocked_channel_count(fm.channels) * fm.height * fm.width // 2,
        dram_write_bytes=blocked_channel_count(out.channels) * out.height * out.width // 2,
        pool_occupancy=lane.max_occupancy,
    )
    return SubgraphResult(output=out, stats=stats)


def shift_pass(fm: FeatureMap, directions=None,
               schedule: TileSchedule = TileSchedule()):
    """Standalone shift of a stored tensor (the downsample skip path)."""
    dirs = directions if directions is not None else default_shift_directions(fm.channels)
    arr = fm.to_array()
    lane = ShiftLane(fm.width, fm.channels, tuple(dirs))
    rows = []
    for y in range(fm.height):
        rows.extend(lane.feed_row(arr[y]))
    rows.extend(lane.finish())
    out = FeatureMap.from_array(np.stack(rows))
    stats = SubgraphStats(
        dram_read_bytes=blocked_channel_count(fm.channels) * fm.height * fm.width // 2,
        dram_write_bytes=blocked_channel_count(out.channels) * out.height * out.width // 2,
        shift_occupancy=lane.max_occupancy,
    )
    return SubgraphResult(output=out, stats=stats)


class SimulatorExecutor:
    """Drives `forward` through the pipeline model instead of reference ops.

    Collects one (step name, stats) entry per engine invocation in `log`.
    """

    def __init__(self, schedule: TileSchedule = TileSchedule(),
                 scheduler: str = "single-thread"):
        self.schedule = schedule
        self.scheduler = scheduler
        self.log = []

    def conv_subgraph(self, fm: FeatureMap, step: ConvStep, bundle: ModelBundle,
                      skip) -> FeatureMap:
        dirs = default_shift_directions(step.out_channels) if step.shift else None
        result = run_subgraph(
            fm,
            bundle.weights[step.name],
            bundle.tables[step.name],
            self.schedule,
            pool=step.pool,
            shift_dirs=dirs,
            shuffle_with=skip,
            scheduler=self.scheduler,
        )
        self.log.append((step.name, result.stats))
        return result.output

    def pool_pass(self, fm: FeatureMap) -> FeatureMap:
        result = pool_pass(fm, self.schedule)
        self.log.append(("pool", result.stats))
        return result.output

    def shift_pass(self, fm: FeatureMap) -> FeatureMap:
        result = shift_pass(fm, schedule=self.schedule)
        self.log.append(("shift", result.stats))
        return result.output
