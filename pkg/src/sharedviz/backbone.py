"""Micro-CNN feature extractor and its on-disk weight container.

The container layout is::

    bytes 0-3     b"SFVW"
    bytes 4-7     header length L, uint32 little-endian
    bytes 8..8+L  UTF-8 JSON header {"tensors": [{"name", "shape", "offset"}], "meta": {...}}
    remainder     float64 little-endian payload

Tensor offsets are byte offsets into the payload (the region after the header).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import BadMagicError, FormatError, ShapeError, ShapeMismatchError, TruncatedError

MAGIC = b"SFVW"


@dataclass(frozen=True)
class Conv:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


Layer = Conv | ReLU | MaxPool


@dataclass(frozen=True)
class BackboneModel:
    layers: tuple
    readout_location: tuple[float, float] = (0.5, 0.5)
    input_size: int = 224

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "readout_location", tuple(float(v) for v in self.readout_location))
        if not layers or not isinstance(layers[-1], ReLU):
            raise ValueError("backbone must end in a ReLU so extracted features are nonnegative")
        channels = 3
        for layer in layers:
            if isinstance(layer, Conv):
                if layer.in_channels != channels:
                    raise ShapeError(f"conv expects {layer.in_channels} input channels, previous layer gives {channels}")
                channels = layer.out_channels
        object.__setattr__(self, "_feature_dim", channels)
        u, v = self.readout_location
        if not (0 <= u <= 1 and 0 <= v <= 1):
            raise ValueError(f"readout location {self.readout_location} outside the unit square")

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def with_location(self, location) -> "BackboneModel":
        return BackboneModel(self.layers, tuple(location), self.input_size)

    def with_feature_gain(self, gain: float) -> "BackboneModel":
        """Scale the output features by exactly ``gain`` (> 0) via the last conv; ReLU is positively homogeneous."""
        if not gain > 0:
            raise ValueError(f"feature gain must be positive, got {gain}")
        last = max(i for i, layer in enumerate(self.layers) if isinstance(layer, Conv))
        layers = list(self.layers)
        conv = layers[last]
        layers[last] = Conv(conv.kernel * gain, conv.bias * gain, conv.stride, conv.padding)
        return BackboneModel(tuple(layers), self.readout_location, self.input_size)


def default_layers(feature_dim: int = 64, seed: int = 0, gain: float = 1.0) -> list:
    """conv(3->16,k5,s2,p2) relu pool conv(16->32,k3,p1) relu pool conv(32->c,k3,p1) relu."""
    rng = np.random.default_rng(seed)
    specs = [(3, 16, 5, 2, 2), (16, 32, 3, 1, 1), (32, feature_dim, 3, 1, 1)]
    layers: list = []
    for n, (cin, cout, k, s, p) in enumerate(specs):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        kernel = rng.normal(0.0, std, size=(cout, cin, k, k))
        bias = rng.normal(0.0, 0.05, size=cout)
        layers += [Conv(kernel, bias, s, p), ReLU()]
        if n < len(specs) - 1:
            layers.append(MaxPool(2, 2))
    return layers


def default_backbone(input_size: int = 224, feature_dim: int = 64, seed: int = 0) -> BackboneModel:
    return BackboneModel(tuple(default_layers(feature_dim, seed)), (0.5, 0.5), input_size)


def identity_backbone(input_size: int) -> BackboneModel:
    """1x1 identity convolution followed by ReLU; features are the sampled input pixels."""
    kernel = np.eye(3).reshape(3, 3, 1, 1)
    return BackboneModel((Conv(kernel, np.zeros(3)), ReLU()), (0.5, 0.5), input_size)


def _check_image(model: BackboneModel, image: np.ndarray) -> None:
    expected = (3, model.input_size, model.input_size)
    if image.shape != expected:
        raise ShapeError(f"image has shape {image.shape}, backbone expects {expected}")


def feature_map(model: BackboneModel, image, record: T.ComputationRecord | None = None) -> np.ndarray:
    """Run the layer stack and return the final ``c x h_a x w_a`` ReLU map."""
    x = T.as_tensor(image)
    _check_image(model, x)
    for layer in model.layers:
        if isinstance(layer, Conv):
            x = T.conv2d(x, layer.kernel, layer.bias, layer.stride, layer.padding, record=record)
        elif isinstance(layer, ReLU):
            x = T.relu(x, record=record)
        else:
            x = T.maxpool2d(x, layer.window, layer.stride, record=record)
    return x


def extract_features(model: BackboneModel, image, location=None):
    """Return ``(features, record)``; features are sampled at ``location`` (default: the model's)."""
    record = T.ComputationRecord()
    fmap = feature_map(model, image, record)
    loc = model.readout_location if location is None else location
    features = T.bilinear_sample(fmap, loc, record=record)
    return features, record


def jacobian_rows(model: BackboneModel, image, feature_indices: Sequence[int], location=None, workers: int = 1):
    """Rows ``d a[i] / d image`` for each requested feature, stacked as ``k x 3 x h x w``."""
    features, record = extract_features(model, image, location)
    c = features.shape[0]
    indices = [int(i) for i in feature_indices]
    for i in indices:
        if not 0 <= i < c:
            raise IndexError(f"feature index {i} out of range [0, {c})")

    def row(i: int) -> np.ndarray:
        adjoint = np.zeros(c)
        adjoint[i] = 1.0
        return T.vjp(record, adjoint)

    out = np.empty((len(indices),) + record.input_shape)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for n, r in enumerate(pool.map(row, indices)):
                out[n] = r
    else:
        for n, i in enumerate(indices):
            out[n] = row(i)
    return out


# -- weight container ---------------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedError(f"{path}: file ends inside the header length field")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedError(f"{path}: header declares {hlen} bytes but only {len(raw) - 8} remain")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload = raw[8 + hlen :]

    tensors, spans = {}, []
    for entry in header.get("tensors", []):
        shape = tuple(int(d) for d in entry["shape"])
        start = int(entry["offset"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or start + nbytes > len(payload):
            raise TruncatedError(
                f"{path}: tensor '{entry['name']}' needs payload bytes [{start}, {start + nbytes}) "
                f"but payload length is {len(payload)}"
            )
        spans.append((start, start + nbytes, entry["name"]))
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=start).reshape(shape).astype(np.float64)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"{path}: tensors '{n0}' and '{n1}' overlap in the payload")
    return tensors, header.get("meta", {})


def save_weights(model: BackboneModel, path) -> None:
    tensors, layer_meta = {}, []
    for n, layer in enumerate(model.layers):
        if isinstance(layer, Conv):
            tensors[f"layer{n}.kernel"] = layer.kernel
            tensors[f"layer{n}.bias"] = layer.bias
            layer_meta.append({"type": "conv", "stride": layer.stride, "padding": layer.padding})
        elif isinstance(layer, ReLU):
            layer_meta.append({"type": "relu"})
        else:
            layer_meta.append({"type": "maxpool", "window": layer.window, "stride": layer.stride})
    meta = {"kind": "backbone", "layers": layer_meta, "readout_location": list(model.readout_location), "input_size": model.input_size}
    save_tensors(path, tensors, meta)


def load_weights(path) -> BackboneModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "backbone":
        raise FormatError(f"{path}: container does not hold a backbone (kind={meta.get('kind')!r})")
    layers: list = []
    for n, spec in enumerate(meta["layers"]):
        if spec["type"] == "conv":
            try:
                kernel, bias = tensors[f"layer{n}.kernel"], tensors[f"layer{n}.bias"]
            except KeyError as exc:
                raise ShapeMismatchError(f"{path}: missing tensor {exc} for conv layer {n}") from None
            if kernel.ndim != 4 or bias.shape != (kernel.shape[0],):
                raise ShapeMismatchError(f"{path}: layer {n} kernel {kernel.shape} and bias {bias.shape} are inconsistent")
            layers.append(Conv(kernel, bias, int(spec["stride"]), int(spec["padding"])))
        elif spec["type"] == "relu":
            layers.append(ReLU())
        elif spec["type"] == "maxpool":
            layers.append(MaxPool(int(spec["window"]), int(spec["stride"])))
        else:
            raise FormatError(f"{path}: unknown layer type {spec['type']!r}")
    try:
        return BackboneModel(tuple(layers), tuple(meta["readout_location"]), int(meta["input_size"]))
    except ShapeError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from None


_DATA = Path(__file__).parent / "data"


def fixture_backbone() -> BackboneModel:
    """Small shipped backbone (32x32 input, 16 features) used by tests and demos."""
    return load_weights(_DATA / "fixture_32.sfvw")


def shipped_default_backbone() -> BackboneModel:
    """Default architecture at 224x224 with 64 features, seed 0."""
    return load_weights(_DATA / "default_224.sfvw")
