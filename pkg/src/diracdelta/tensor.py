"""4-bit tensors: nibble packing, serialized blobs, and the channel-blocked DRAM layout.

Activations and weights are unsigned 4-bit codes. In memory and on disk two
codes share one byte, low nibble first, with a zero pad nibble when the count
is odd. A weight code ``c`` stands for the odd integer ``2*c - 15``, so a dot
product over the largest channel count in the network is bounded by
``15 * 15 * 512 = 115200``. That magnitude needs 18 signed bits; accumulators
here use int32, which leaves headroom, and `check_accumulators` asserts the
bound wherever accumulators are produced.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

CODE_MAX = 15
MAX_CHANNELS = 512
ACC_LIMIT = CODE_MAX * CODE_MAX * MAX_CHANNELS  # 115200
ACC_DTYPE = np.int32
DEFAULT_BLOCK = 32

_BLOB_HEADER = struct.Struct("<III")


def _as_code_array(codes, what: str = "code") -> np.ndarray:
    arr = np.asarray(codes)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and np.all(arr == np.floor(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ValidationError(f"{what}s must be integers, got dtype {arr.dtype}")
    flat = arr.reshape(-1)
    bad = np.flatnonzero((flat < 0) | (flat > CODE_MAX))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"{what} {int(flat[i])} at index {i} outside [0, {CODE_MAX}]"
        )
    return flat.astype(np.uint8)


def pack(codes) -> bytes:
    """Pack a flat sequence of 4-bit codes two per byte, low nibble first."""
    arr = _as_code_array(codes)
    if arr.size % 2:
        arr = np.concatenate([arr, np.zeros(1, dtype=np.uint8)])
    lo = arr[0::2]
    hi = arr[1::2]
    return (lo | (hi << 4)).tobytes()


def unpack(buf: bytes, count: int) -> np.ndarray:
    """Inverse of `pack`: recover ``count`` codes from a packed buffer."""
    if count < 0:
        raise ValidationError("code count must be non-negative")
    need = (count + 1) // 2
    if len(buf) < need:
        raise ValidationError(
            f"packed buffer holds {len(buf)} bytes, {need} needed for {count} codes"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=need)
    out = np.empty(count, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw[: count // 2] >> 4
    return out


@dataclass(frozen=True)
class FeatureMap:
    """Immutable activation tensor of 4-bit codes, channel innermost.

    ``packed`` holds the codes of the (y, x, c) traversal in packed nibble
    form, which is also the serialized representation, so bit-exact equality
    between two maps is plain dataclass equality.
    """

    height: int
    width: int
    channels: int
    packed: bytes

    def __post_init__(self):
        for field in ("height", "width", "channels"):
            if getattr(self, field) < 0:
                raise ShapeError(f"{field} must be non-negative")
        expected = (self.height * self.width * self.channels + 1) // 2
        if len(self.packed) != expected:
            raise ValidationError(
                f"packed length {len(self.packed)} != expected {expected} bytes for "
                f"{self.height}x{self.width}x{self.channels}"
            )

    @classmethod
    def from_array(cls, arr) -> "FeatureMap":
        a = np.asarray(arr)
        if a.ndim != 3:
            raise ShapeError(f"expected a (height, width, channels) array, got shape {a.shape}")
        h, w, c = a.shape
        return cls(h, w, c, pack(a.reshape(-1)))

    def to_array(self) -> np.ndarray:
        codes = unpack(self.packed, self.height * self.width * self.channels)
        return codes.reshape(self.height, self.width, self.channels)

    @property
    def num_codes(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """1x1 convolution (or FC) weights as a dense (out, in) grid of 4-bit codes."""

    out_channels: int
    in_channels: int
    codes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.codes)
        if arr.shape != (self.out_channels, self.in_channels):
            raise ShapeError(
                f"weight codes shape {arr.shape} != ({self.out_channels}, {self.in_channels})"
            )
        flat = _as_code_array(arr, what="weight code")
        arr = flat.reshape(self.out_channels, self.in_channels).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "codes", arr)

    def effective(self) -> np.ndarray:
        """Signed integer weight values, ``2*code - 15``: the odd integers in [-15, 15]."""
        return (2 * self.codes.astype(ACC_DTYPE)) - CODE_MAX

    def packed(self) -> bytes:
        return pack(self.codes.reshape(-1))

    @classmethod
    def from_packed(cls, buf: bytes, out_channels: int, in_channels: int) -> "WeightMatrix":
        codes = unpack(buf, out_channels * in_channels).reshape(out_channels, in_channels)
        return cls(out_channels, in_channels, codes)


def blocked_channel_count(channels: int, block: int = DEFAULT_BLOCK) -> int:
    """Channel count after zero padding up to a whole number of blocks."""
    if block < 1:
        raise ValidationError("block must be >= 1")
    if channels == 0:
        return 0
    return ((channels + block - 1) // block) * block


def to_blocked_layout(fm: FeatureMap, block: int = DEFAULT_BLOCK) -> bytes:
    """Serialize a map in DRAM order: (channel block, y, x, channel within block).

    Channels are zero padded up to a whole number of blocks, so a map with
    fewer channels than ``block`` occupies exactly one padded block.
    """
    cp = blocked_channel_count(fm.channels, block)
    arr = fm.to_array()
    if cp != fm.channels:
        pad = np.zeros((fm.height, fm.width, cp - fm.channels), dtype=np.uint8)
        arr = np.concatenate([arr, pad], axis=2)
    nb = cp // block if block else 0
    arr = arr.reshape(fm.height, fm.width, nb, block).transpose(2, 0, 1, 3)
    return pack(arr.reshape(-1))


def from_blocked_layout(
    buf: bytes, height: int, width: int, channels: int, block: int = DEFAULT_BLOCK
) -> FeatureMap:
    """Inverse of `to_blocked_layout`; drops the channel padding."""
    cp = blocked_channel_count(channels, block)
    nb = cp // block if block else 0
    codes = unpack(buf, height * width * cp)
    arr = codes.reshape(nb, height, width, block).transpose(1, 2, 0, 3)
    arr = arr.reshape(height, width, cp)[:, :, :channels]
    return FeatureMap.from_array(arr)


def write_tensor_blob(path, fm: FeatureMap) -> None:
    """Write the external tensor format: little-endian u32 H, W, C, then packed nibbles."""
    with open(path, "wb") as f:
        f.write(_BLOB_HEADER.pack(fm.height, fm.width, fm.channels))
        f.write(fm.packed)


def read_tensor_blob(path) -> FeatureMap:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _BLOB_HEADER.size:
        raise ValidationError(
            f"tensor blob header truncated: {len(data)} bytes, "
            f"{_BLOB_HEADER.size} needed for the height/width/channels fields"
        )
    h, w, c = _BLOB_HEADER.unpack_from(data)
    payload = data[_BLOB_HEADER.size :]
    expected = (h * w * c + 1) // 2
    if len(payload) != expected:
        raise ValidationError(
            f"tensor blob payload is {len(payload)} bytes, header fields "
            f"{h}x{w}x{c} require {expected}"
        )
    return FeatureMap(h, w, c, payload)


def check_accumulators(acc, limit: int = ACC_LIMIT) -> None:
    """Assert the documented accumulator magnitude bound."""
    arr = np.asarray(acc)
    if arr.size == 0:
        return
    peak = int(np.abs(arr).max())
    if peak > limit:
        raise ValidationError(f"accumulator magnitude {peak} exceeds bound {limit}")
