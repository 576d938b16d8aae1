"""Reference integer implementations of every network operator.

These are deliberately schedule-free: plain array math, one function per
operator, exact integer accumulators. The pipeline model is required to match
each of them bit for bit, so they double as oracles for the accelerator
tests. Array-level helpers (suffix ``_array``) back both the 4-bit ops and
the float graph.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError, ValidationError
from .quant import NetworkQuantParams
from .tensor import ACC_DTYPE, FeatureMap, WeightMatrix, check_accumulators


@dataclass(frozen=True)
class ShiftDirection:
    """One of the five per-channel copy directions, as (dy, dx) into the input."""

    dy: int
    dx: int

    def __post_init__(self):
        if self.dy not in (-1, 0, 1) or self.dx not in (-1, 0, 1):
            raise ValidationError(f"shift offsets must be -1, 0, or 1, got ({self.dy}, {self.dx})")
        if abs(self.dy) + abs(self.dx) > 1:
            raise ValidationError("diagonal shifts are not part of the operator set")


IDENTITY = ShiftDirection(0, 0)
UP = ShiftDirection(1, 0)  # out[y, x] = in[y + 1, x]: content moves up
DOWN = ShiftDirection(-1, 0)
LEFT = ShiftDirection(0, 1)
RIGHT = ShiftDirection(0, -1)
DIRECTION_CYCLE = (IDENTITY, UP, DOWN, LEFT, RIGHT)


def default_shift_directions(channels: int) -> tuple:
    """Direction for channel c is DIRECTION_CYCLE[c % 5]."""
    return tuple(DIRECTION_CYCLE[c % 5] for c in range(channels))


def conv1x1_ref(fm: FeatureMap, weights: WeightMatrix) -> np.ndarray:
    """Integer 1x1 convolution: acc[y, x, o] = sum_i (2*w[o, i] - 15) * a[y, x, i].

    Returns int32 accumulators of shape (height, width, out_channels).
    """
    if fm.channels != weights.in_channels:
        raise ShapeError(
            f"feature map has {fm.channels} channels, weights expect {weights.in_channels}"
        )
    acts = fm.to_array().reshape(-1, fm.channels).astype(np.float64)
    eff = weights.effective().astype(np.float64)
    # float64 matmul on integers is exact below 2**53; |acc| <= 15*15*512 here
    acc = acts @ eff.T
    out = acc.reshape(fm.height, fm.width, weights.out_channels).astype(ACC_DTYPE)
    check_accumulators(out)
    return out


def maxpool2x2_array(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[0] // 2, arr.shape[1] // 2
    trimmed = arr[: 2 * h, : 2 * w]
    return trimmed.reshape(h, 2, w, 2, arr.shape[2]).max(axis=(1, 3))


def maxpool2x2(fm: FeatureMap) -> FeatureMap:
    """2x2 stride-2 max pooling; a trailing odd row or column is dropped."""
    return FeatureMap.from_array(maxpool2x2_array(fm.to_array()))


def shift_array(arr: np.ndarray, directions) -> np.ndarray:
    h, w, c = arr.shape
    if len(directions) != c:
        raise ShapeError(f"{len(directions)} directions for {c} channels")
    out = np.zeros_like(arr)
    for d in set(directions):
        chans = [i for i in range(c) if directions[i] == d]
        y0, y1 = max(0, -d.dy), min(h, h - d.dy)
        x0, x1 = max(0, -d.dx), min(w, w - d.dx)
        if y0 >= y1 or x0 >= x1:
            continue
        out[y0:y1, x0:x1, chans] = arr[y0 + d.dy : y1 + d.dy, x0 + d.dx : x1 + d.dx, chans]
    return out


def shift(fm: FeatureMap, directions) -> FeatureMap:
    """Per-channel spatial copy with zero fill at the vacated border."""
    return FeatureMap.from_array(shift_array(fm.to_array(), directions))


def concat_shuffle_array(skip: np.ndarray, residual: np.ndarray) -> np.ndarray:
    if skip.shape[:2] != residual.shape[:2]:
        raise ShapeError(
            f"branch spatial sizes differ: {skip.shape[:2]} vs {residual.shape[:2]}"
        )
    if skip.shape[2] != residual.shape[2]:
        raise ShapeError(
            f"branch channel counts differ: {skip.shape[2]} vs {residual.shape[2]}"
        )
    merged = np.concatenate([skip, residual], axis=2)
    c = merged.shape[2]
    if c % 4:
        raise ShapeError(f"concatenated channel count {c} must be divisible by 4")
    # out[..., j] = merged[..., (j + c/4) % c]: circular left rotation by a quarter
    return np.roll(merged, -(c // 4), axis=2)


def concat_shuffle(skip: FeatureMap, residual: FeatureMap) -> FeatureMap:
    """Concatenate two equal halves and rotate channels left by a quarter.

    The rotation exchanges exactly C/4 channels between the halves while
    keeping the layout contiguous, which is what lets the hardware realize it
    as a writeback address offset.
    """
    return FeatureMap.from_array(concat_shuffle_array(skip.to_array(), residual.to_array()))


def channel_split_array(arr: np.ndarray):
    c = arr.shape[2]
    if c % 2:
        raise ShapeError(f"cannot split {c} channels in half")
    return arr[:, :, : c // 2], arr[:, :, c // 2 :]


def channel_split(fm: FeatureMap):
    """Split into (first half, second half) along channels."""
    a, b = channel_split_array(fm.to_array())
    return FeatureMap.from_array(a), FeatureMap.from_array(b)


def global_avgpool(fm: FeatureMap, net: NetworkQuantParams, size: int = 7) -> np.ndarray:
    """Correctly rounded mean of the dequantized activations, per channel.

    The code sum is exact, so the mean is computed as the rational
    ``sum * s / (size * size * levels)`` and rounded once to float64.
    """
    if fm.height != size or fm.width != size:
        raise ShapeError(
            f"global pool expects a {size}x{size} map, got {fm.height}x{fm.width}"
        )
    sums = fm.to_array().astype(np.int64).sum(axis=(0, 1))
    den = size * size * net.act_levels
    s = Fraction(net.s)
    return np.array([float(Fraction(int(v)) * s / den) for v in sums], dtype=np.float64)


def fc_bit_serial(codes, weights: WeightMatrix) -> np.ndarray:
    """Fully connected layer evaluated one weight bit plane at a time.

    With d_b[o] = sum_i bit_b(w[o, i]) * a[i], the result is
    ``2 * sum_b 2^b * d_b - 15 * sum_i a[i]``, which equals the direct
    integer dot product with effective weights 2*w - 15.
    """
    a = np.asarray(codes)
    if a.ndim != 1 or a.shape[0] != weights.in_channels:
        raise ShapeError(
            f"activation vector of length {a.shape} does not match {weights.in_channels} inputs"
        )
    if a.size and (a.min() < 0 or a.max() > 15):
        raise ValidationError("activation codes outside [0, 15]")
    a64 = a.astype(np.float64)
    wc = weights.codes
    total = np.zeros(weights.out_channels, dtype=np.int64)
    for b in range(4):
        plane = ((wc >> b) & 1).astype(np.float64)
        total += (1 << b) * (plane @ a64).astype(np.int64)
    return 2 * total - 15 * int(a.astype(np.int64).sum())
