"""Model bundles on disk: a manifest plus checksummed binary blobs.

A bundle is a directory:

    manifest.json       network shape, quantization params, per-layer rows
    <layer>.w           packed 4-bit weight codes, trailing CRC32 (LE u32)
    <layer>.t           threshold table as little-endian int32, trailing CRC32
    fc.w                packed classifier weight codes, trailing CRC32

`manifest.json` is written with sorted keys and a fixed layout so that the
same bundle saves byte-identically every time. On load the layer rows are
cross-checked against the graph regenerated from the network parameters, so
a manifest edited out of step with its own shape description is rejected
rather than silently trusted.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BundleError, ChecksumError, GraphError
from .net import ModelBundle, NetworkSpec, compile_steps, conv_steps
from .quant import (
    LayerQuantParams,
    NetworkQuantParams,
    QuantConfig,
    ThresholdTable,
    build_threshold_table,
    quantize_weights,
)
from .tensor import WeightMatrix

FORMAT_VERSION = 1

_CRC = struct.Struct("<I")


def _frame(payload: bytes) -> bytes:
    return payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def _unframe(buf: bytes, what: str) -> bytes:
    if len(buf) < _CRC.size:
        raise ChecksumError(f"{what}: blob is shorter than its own checksum")
    payload, tail = buf[: -_CRC.size], buf[-_CRC.size :]
    (stored,) = _CRC.unpack(tail)
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(
            f"{what}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})"
        )
    return payload


def _layer_rows(bundle: ModelBundle) -> list:
    rows = []
    for step in conv_steps(bundle.spec):
        p = bundle.layer_params[step.name]
        rows.append(
            {
                "alpha": p.alpha,
                "in_channels": step.in_channels,
                "name": step.name,
                "out_channels": step.out_channels,
                "pool": step.pool,
                "shift": step.shift,
                "shuffle_with": step.shuffle_with,
                "spatial": step.spatial,
                "table_file": f"{step.name}.t",
                "weight_file": f"{step.name}.w",
                "weight_scale": p.weight_scale,
            }
        )
    return rows


def save_bundle(bundle: ModelBundle, path) -> Path:
    """Write the bundle directory; returns the directory path."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    spec = bundle.spec
    manifest = {
        "fc": {
            "in_features": spec.conv5_channels,
            "out_features": spec.num_classes,
            "scale": bundle.fc_scale,
            "weight_file": "fc.w",
        },
        "format_version": FORMAT_VERSION,
        "layers": _layer_rows(bundle),
        "network": {
            "conv5_channels": spec.conv5_channels,
            "input_channels": spec.input_channels,
            "input_size": spec.input_size,
            "num_classes": spec.num_classes,
            "stage_channels": list(spec.stage_channels),
            "stage_repeats": list(spec.stage_repeats),
            "stem_channels": list(spec.stem_channels),
        },
        "quant": {
            "k_a": bundle.net.k_a,
            "k_w": bundle.net.k_w,
            "s": bundle.net.s,
            "tag": QuantConfig(bundle.net.k_w, bundle.net.k_a).tag,
        },
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    for step in conv_steps(spec):
        (root / f"{step.name}.w").write_bytes(_frame(bundle.weights[step.name].packed()))
        table = np.asarray(bundle.tables[step.name].thresholds, dtype="<i4")
        (root / f"{step.name}.t").write_bytes(_frame(table.tobytes()))
    (root / "fc.w").write_bytes(_frame(bundle.fc_weights.packed()))
    return root


def load_bundle(path) -> ModelBundle:
    """Read a bundle directory back, verifying checksums and graph consistency."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise BundleError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise BundleError(f"manifest.json is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle format_version {version!r}")
    try:
        n = manifest["network"]
        spec = NetworkSpec(
            input_size=n["input_size"],
            input_channels=n["input_channels"],
            stem_channels=tuple(n["stem_channels"]),
            stage_channels=tuple(n["stage_channels"]),
            stage_repeats=tuple(n["stage_repeats"]),
            conv5_channels=n["conv5_channels"],
            num_classes=n["num_classes"],
        )
        q = manifest["quant"]
        net = NetworkQuantParams(s=q["s"], k_w=q["k_w"], k_a=q["k_a"])
        rows = manifest["layers"]
        fc_row = manifest["fc"]
    except (KeyError, TypeError) as e:
        raise BundleError(f"manifest.json is missing required field: {e}") from e

    steps = conv_steps(spec)
    if len(rows) != len(steps):
        raise GraphError(
            f"manifest lists {len(rows)} layers but the graph has {len(steps)}"
        )
    weights = {}
    tables = {}
    layer_params = {}
    for step, row in zip(steps, rows):
        for key, want in (
            ("name", step.name),
            ("in_channels", step.in_channels),
            ("out_channels", step.out_channels),
            ("spatial", step.spatial),
            ("pool", step.pool),
            ("shift", step.shift),
            ("shuffle_with", step.shuffle_with),
        ):
            if row.get(key) != want:
                raise GraphError(
                    f"manifest row for {step.name} disagrees with the graph: "
                    f"{key} is {row.get(key)!r}, expected {want!r}"
                )
        layer_params[step.name] = LayerQuantParams(
            alpha=row["alpha"], weight_scale=row["weight_scale"]
        )
        wbuf = _read_blob(root, row["weight_file"], f"layer {step.name} weights")
        weights[step.name] = WeightMatrix.from_packed(
            wbuf, step.out_channels, step.in_channels
        )
        tbuf = _read_blob(root, row["table_file"], f"layer {step.name} table")
        want_bytes = net.act_levels * 4
        if len(tbuf) != want_bytes:
            raise BundleError(
                f"layer {step.name} table: payload is {len(tbuf)} bytes, "
                f"expected {want_bytes}"
            )
        values = np.frombuffer(tbuf, dtype="<i4")
        tables[step.name] = ThresholdTable(tuple(int(v) for v in values))
    if (fc_row.get("in_features"), fc_row.get("out_features")) != (
        spec.conv5_channels,
        spec.num_classes,
    ):
        raise GraphError("manifest fc row disagrees with the network shape")
    fc_buf = _read_blob(root, fc_row["weight_file"], "fc weights")
    fc_weights = WeightMatrix.from_packed(fc_buf, spec.num_classes, spec.conv5_channels)
    bundle = ModelBundle(
        spec=spec,
        net=net,
        weights=weights,
        tables=tables,
        layer_params=layer_params,
        fc_weights=fc_weights,
        fc_scale=fc_row["scale"],
    )
    bundle.validate()
    return bundle


def _read_blob(root: Path, rel: str, what: str) -> bytes:
    p = root / rel
    if not p.is_file():
        raise BundleError(f"{what}: missing blob file {rel}")
    return _unframe(p.read_bytes(), what)


def random_bundle(spec: NetworkSpec, net: NetworkQuantParams, seed: int) -> ModelBundle:
    """A structurally valid bundle with seeded random weights.

    Weight codes are uniform over the whole 4-bit range, every layer uses the
    largest-magnitude weight scale (one code step = 1/15) and a clip bound
    drawn from [0.5 s, 1.5 s], which keeps the threshold construction well
    inside its valid range. Deterministic per seed: the same seed always
    saves byte-identical bundles.
    """
    rng = np.random.default_rng(seed)
    w_scale = 1.0 / net.weight_levels
    weights = {}
    tables = {}
    layer_params = {}
    for step in conv_steps(spec):
        codes = rng.integers(0, net.weight_levels + 1,
                             size=(step.out_channels, step.in_channels), dtype=np.uint8)
        weights[step.name] = WeightMatrix(step.out_channels, step.in_channels, codes)
        alpha = net.s * float(rng.uniform(0.5, 1.5))
        p = LayerQuantParams(alpha=alpha, weight_scale=w_scale)
        layer_params[step.name] = p
        tables[step.name] = build_threshold_table(p, net)
    fc_codes = rng.integers(0, net.weight_levels + 1,
                            size=(spec.num_classes, spec.conv5_channels), dtype=np.uint8)
    fc_weights = WeightMatrix(spec.num_classes, spec.conv5_channels, fc_codes)
    fc_scale = w_scale * net.s / net.act_levels
    return ModelBundle(
        spec=spec,
        net=net,
        weights=weights,
        tables=tables,
        layer_params=layer_params,
        fc_weights=fc_weights,
        fc_scale=fc_scale,
    )


def quantize_bundle(spec: NetworkSpec, net: NetworkQuantParams, float_weights: dict,
                    alphas=None) -> ModelBundle:
    """Quantize float weights into a runnable bundle.

    ``float_weights`` maps every conv step name plus "fc" to a float
    (out, in) array. Each layer's weight scale comes out of its own weight
    quantization; clip bounds default to the shared activation scale and may
    be overridden per layer through ``alphas``.
    """
    alphas = alphas or {}
    weights = {}
    tables = {}
    layer_params = {}
    for step in conv_steps(spec):
        if step.name not in float_weights:
            raise BundleError(f"no float weights supplied for layer {step.name}")
        w = np.asarray(float_weights[step.name], dtype=np.float64)
        if w.shape != (step.out_channels, step.in_channels):
            raise BundleError(
                f"layer {step.name}: float weights have shape {w.shape}, "
                f"expected ({step.out_channels}, {step.in_channels})"
            )
        codes, w_scale = quantize_weights(w, net.k_w)
        weights[step.name] = WeightMatrix(
            step.out_channels, step.in_channels, codes.astype(np.uint8)
        )
        p = LayerQuantParams(alpha=float(alphas.get(step.name, net.s)),
                             weight_scale=w_scale)
        layer_params[step.name] = p
        tables[step.name] = build_threshold_table(p, net)
    if "fc" not in float_weights:
        raise BundleError("no float weights supplied for layer fc")
    fw = np.asarray(float_weights["fc"], dtype=np.float64)
    if fw.shape != (spec.num_classes, spec.conv5_channels):
        raise BundleError(
            f"layer fc: float weights have shape {fw.shape}, "
            f"expected ({spec.num_classes}, {spec.conv5_channels})"
        )
    fc_codes, fc_w_scale = quantize_weights(fw, net.k_w)
    fc_weights = WeightMatrix(spec.num_classes, spec.conv5_channels,
                              fc_codes.astype(np.uint8))
    return ModelBundle(
        spec=spec,
        net=net,
        weights=weights,
        tables=tables,
        layer_params=layer_params,
        fc_weights=fc_weights,
        fc_scale=fc_w_scale * net.s / net.act_levels,
    )


def read_float_weights(path, spec: NetworkSpec) -> dict:
    """Load raw float32 weight files: one little-endian `<layer>.bin` each.

    Every conv layer and the classifier ("fc.bin") must be present, stored
    row-major as (out_channels, in_channels).
    """
    root = Path(path)
    shapes = {s.name: (s.out_channels, s.in_channels) for s in conv_steps(spec)}
    shapes["fc"] = (spec.num_classes, spec.conv5_channels)
    out = {}
    for name, (oc, ic) in shapes.items():
        p = root / f"{name}.bin"
        if not p.is_file():
            raise BundleError(f"missing weight file {p.name} for layer {name}")
        buf = p.read_bytes()
        want = oc * ic * 4
        if len(buf) != want:
            raise BundleError(
                f"weight file {p.name}: {len(buf)} bytes, expected {want} "
                f"for shape ({oc}, {ic})"
            )
        out[name] = np.frombuffer(buf, dtype="<f4").reshape(oc, ic).astype(np.float64)
    return out
