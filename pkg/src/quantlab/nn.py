"""Layer graph, float reference forward pass, and the on-disk formats.

The layer set is the small CNN vocabulary the engine quantizes: conv2d,
linear, relu, maxpool, avgpool, flatten. Models are straight-line graphs
(no branches) over single channel-first images.

Model files ("QMOD1") are a UTF-8 JSON header line followed by a little-endian
binary32 blob addressed by byte offsets from the header. Dataset files
("QDS1") are a JSON header line, the per-sample binary32 payload, and a
trailing array of unsigned 16-bit labels. Both are hashed/loaded as whole
files; a model's identity is the SHA-256 of its file bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Shape, Tensor, validate_shape

CONV2D = "conv2d"
LINEAR = "linear"
RELU = "relu"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
FLATTEN = "flatten"

LAYER_KINDS = (CONV2D, LINEAR, RELU, MAXPOOL, AVGPOOL, FLATTEN)
# Layers whose outputs get their own quantization parameters.
QUANTIZING_KINDS = (CONV2D, LINEAR)

MODEL_MAGIC = "QMOD1"
DATASET_MAGIC = "QDS1"


@dataclass(frozen=True)
class Layer:
    kind: str
    weights: Tensor | None = None
    bias: Tensor | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV2D:
            if self.weights is None or self.weights.ndim != 4:
                raise ValueError("conv2d needs 4-D weights (out_ch, in_ch, kh, kw)")
            if self.stride is None or self.padding is None:
                raise ValueError("conv2d needs stride and padding")
            if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
                raise ValueError("conv2d stride must be >= 1 and padding >= 0")
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise ValueError("conv2d bias length must equal the output channel count")
        elif self.kind == LINEAR:
            if self.weights is None or self.weights.ndim != 2:
                raise ValueError("linear needs 2-D weights (out_features, in_features)")
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise ValueError("linear bias length must equal the output feature count")
        elif self.kind in (MAXPOOL, AVGPOOL):
            if self.kernel is None or any(k < 1 for k in self.kernel):
                raise ValueError(f"{self.kind} needs a positive kernel")
            if self.stride is None or any(s < 1 for s in self.stride):
                raise ValueError(f"{self.kind} needs a stride >= 1")


def conv2d(
    weights: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Layer:
    return Layer(CONV2D, weights=weights, bias=bias, stride=tuple(stride), padding=tuple(padding))


def linear(weights: Tensor, bias: Tensor | None = None) -> Layer:
    return Layer(LINEAR, weights=weights, bias=bias)


def relu() -> Layer:
    return Layer(RELU)


def maxpool(kernel: tuple[int, int], stride: tuple[int, int] | None = None) -> Layer:
    k = tuple(kernel)
    return Layer(MAXPOOL, kernel=k, stride=tuple(stride) if stride else k)


def avgpool(kernel: tuple[int, int], stride: tuple[int, int] | None = None) -> Layer:
    k = tuple(kernel)
    return Layer(AVGPOOL, kernel=k, stride=tuple(stride) if stride else k)


def flatten() -> Layer:
    return Layer(FLATTEN)


def conv_output_hw(
    h: int, w: int, kernel: tuple[int, int], stride: tuple[int, int], padding: tuple[int, int]
) -> tuple[int, int]:
    """Spatial output size of a conv/pool window sweep; rejects empty outputs."""
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"kernel {kernel} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def output_shape(layer: Layer, in_shape: Shape) -> Shape:
    """Shape a layer produces from `in_shape`; raises on incompatible input."""
    if layer.kind == CONV2D:
        if len(in_shape) != 3:
            raise ValueError(f"conv2d expects a (C, H, W) input, got {in_shape}")
        l, p, kh, kw = layer.weights.shape
        if in_shape[0] != p:
            raise ValueError(f"conv2d expects {p} input channels, got {in_shape[0]}")
        oh, ow = conv_output_hw(in_shape[1], in_shape[2], (kh, kw), layer.stride, layer.padding)
        return (l, oh, ow)
    if layer.kind == LINEAR:
        h, d = layer.weights.shape
        if in_shape != (d,):
            raise ValueError(f"linear expects a ({d},) input, got {in_shape}")
        return (h,)
    if layer.kind in (MAXPOOL, AVGPOOL):
        if len(in_shape) != 3:
            raise ValueError(f"{layer.kind} expects a (C, H, W) input, got {in_shape}")
        oh, ow = conv_output_hw(in_shape[1], in_shape[2], layer.kernel, layer.stride, (0, 0))
        return (in_shape[0], oh, ow)
    if layer.kind == FLATTEN:
        return (math.prod(in_shape),)
    return in_shape  # relu


@dataclass(frozen=True)
class ModelGraph:
    """Straight-line layer sequence with its storage-grid identity hash."""

    layers: tuple[Layer, ...]
    input_shape: Shape
    model_hash: str = field(compare=False)

    @classmethod
    def from_layers(cls, layers: Sequence[Layer], input_shape: Sequence[int]) -> "ModelGraph":
        """Build a graph, snapping weights to the binary32 storage grid.

        Snapping makes an in-memory graph bit-identical to its saved/reloaded
        form, so calibration records keyed by the model hash transfer exactly.
        """
        in_shape = validate_shape(input_shape)
        snapped = tuple(_snap_layer(l) for l in layers)
        shape = in_shape
        for l in snapped:  # validates that consecutive layers compose
            shape = output_shape(l, shape)
        blob = _serialize_model(snapped, in_shape)
        return cls(snapped, in_shape, hashlib.sha256(blob).hexdigest())

    def layer_output_shapes(self) -> list[Shape]:
        shapes = []
        shape = self.input_shape
        for l in self.layers:
            shape = output_shape(l, shape)
            shapes.append(shape)
        return shapes


def _snap_tensor(t: Tensor | None) -> Tensor | None:
    if t is None:
        return None
    return Tensor(t.shape, t.data.astype(np.float32).astype(np.float64))


def _snap_layer(l: Layer) -> Layer:
    if l.weights is None and l.bias is None:
        return l
    return Layer(l.kind, _snap_tensor(l.weights), _snap_tensor(l.bias), l.kernel, l.stride, l.padding)


def im2col(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: tuple[int, int],
    pad_value: float | int = 0,
) -> tuple[np.ndarray, int, int]:
    """Gather conv windows of a (C, H, W) array into rows.

    Returns (patches, out_h, out_w) where patches has shape
    (out_h * out_w, C * kh * kw) with taps ordered channel-major then
    row-major within the window — the same order the integer kernels and the
    moment estimator accumulate in.
    """
    c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]  # (C, oh, ow, kh, kw)
    patches = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    return patches, oh, ow


def _forward_layer_float(layer: Layer, x: np.ndarray) -> np.ndarray:
    if layer.kind == CONV2D:
        l, p, kh, kw = layer.weights.shape
        patches, oh, ow = im2col(x, (kh, kw), layer.stride, layer.padding, 0.0)
        w2d = layer.weights.array().reshape(l, p * kh * kw)
        out = patches @ w2d.T  # (oh*ow, l)
        if layer.bias is not None:
            out = out + layer.bias.array()
        return out.T.reshape(l, oh, ow)
    if layer.kind == LINEAR:
        out = layer.weights.array() @ x
        if layer.bias is not None:
            out = out + layer.bias.array()
        return out
    if layer.kind == RELU:
        return np.maximum(x, 0.0)
    if layer.kind in (MAXPOOL, AVGPOOL):
        c = x.shape[0]
        win = np.lib.stride_tricks.sliding_window_view(x, layer.kernel, axis=(1, 2))
        win = win[:, :: layer.stride[0], :: layer.stride[1]]
        pooled = win.max(axis=(3, 4)) if layer.kind == MAXPOOL else win.mean(axis=(3, 4))
        return pooled.reshape(c, *pooled.shape[1:])
    return x.reshape(-1)  # flatten


def forward_float(model: ModelGraph, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Reference binary64 forward pass.

    Returns the final output and every layer's output tensor in order; the
    conv/linear entries are the pre-activations the quantization schemes
    model.
    """
    if x.shape != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model {model.input_shape}")
    a = x.array()
    outs: list[Tensor] = []
    for layer in model.layers:
        a = _forward_layer_float(layer, a)
        outs.append(Tensor.from_array(a))
    return outs[-1], outs


# ---------------------------------------------------------------------------
# Dataset container


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Tensor, ...]
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("dataset needs at least one sample")
        if len(self.samples) != len(self.labels):
            raise ValueError("sample/label count mismatch")
        shape = self.samples[0].shape
        if any(s.shape != shape for s in self.samples):
            raise ValueError("samples must share one shape")
        if any(not 0 <= l <= 0xFFFF for l in self.labels):
            raise ValueError("labels must fit in uint16")

    @property
    def sample_shape(self) -> Shape:
        return self.samples[0].shape

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            tuple(self.samples[i] for i in indices),
            tuple(self.labels[i] for i in indices),
        )


# ---------------------------------------------------------------------------
# QMOD1 model files

_GEOMETRY_KEYS = ("kernel", "stride", "padding")


def _header_bytes(doc: dict) -> bytes:
    text = json.dumps(doc, separators=(",", ":"))
    if "\n" in text:
        raise ValueError("header must be a single line")
    return text.encode("utf-8") + b"\n"


def _serialize_model(layers: tuple[Layer, ...], input_shape: Shape) -> bytes:
    chunks: list[bytes] = []
    offset = 0
    descs = []
    for layer in layers:
        desc: dict = {"kind": layer.kind, "geometry": {}}
        for key in _GEOMETRY_KEYS:
            val = getattr(layer, key)
            if val is not None:
                desc["geometry"][key] = list(val)
        if layer.weights is not None:
            raw = layer.weights.data.astype("<f4").tobytes()
            desc["weight_offset"] = offset
            desc["weight_shape"] = list(layer.weights.shape)
            chunks.append(raw)
            offset += len(raw)
        else:
            desc["weight_offset"] = None
            desc["weight_shape"] = None
        if layer.bias is not None:
            raw = layer.bias.data.astype("<f4").tobytes()
            desc["bias_offset"] = offset
            chunks.append(raw)
            offset += len(raw)
        else:
            desc["bias_offset"] = None
        descs.append(desc)
    header = {"magic": MODEL_MAGIC, "input_shape": list(input_shape), "layers": descs}
    return _header_bytes(header) + b"".join(chunks)


def save_model(model: ModelGraph, path: str) -> str:
    """Write a QMOD1 file; returns the model hash (= SHA-256 of the file)."""
    blob = _serialize_model(model.layers, model.input_shape)
    digest = hashlib.sha256(blob).hexdigest()
    if digest != model.model_hash:
        raise ValueError("model hash changed since construction")
    with open(path, "wb") as f:
        f.write(blob)
    return digest


def _read_floats(blob: bytes, offset: int, count: int) -> np.ndarray:
    end = offset + 4 * count
    if offset < 0 or end > len(blob):
        raise ValueError("blob offset out of bounds")
    return np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64)


def load_model(path: str) -> ModelGraph:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("missing header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("magic") != MODEL_MAGIC:
        raise ValueError(f"bad magic {header.get('magic')!r}")
    blob = raw[nl + 1 :]
    input_shape = validate_shape(header["input_shape"])
    layers = []
    for desc in header["layers"]:
        kind = desc["kind"]
        geo = desc.get("geometry", {})
        weights = bias = None
        if desc.get("weight_offset") is not None:
            shape = validate_shape(desc["weight_shape"])
            weights = Tensor(shape, _read_floats(blob, desc["weight_offset"], math.prod(shape)))
        if desc.get("bias_offset") is not None:
            if weights is None:
                raise ValueError("bias without weights")
            bias = Tensor(
                (weights.shape[0],), _read_floats(blob, desc["bias_offset"], weights.shape[0])
            )
        layers.append(
            Layer(
                kind,
                weights=weights,
                bias=bias,
                kernel=tuple(geo["kernel"]) if "kernel" in geo else None,
                stride=tuple(geo["stride"]) if "stride" in geo else None,
                padding=tuple(geo["padding"]) if "padding" in geo else None,
            )
        )
    model = ModelGraph.from_layers(layers, input_shape)
    if model.model_hash != hashlib.sha256(raw).hexdigest():
        raise ValueError("model file does not round-trip to its own hash")
    return model


# ---------------------------------------------------------------------------
# QDS1 dataset files


def save_dataset(ds: Dataset, path: str) -> None:
    header = {
        "magic": DATASET_MAGIC,
        "count": len(ds),
        "shape": list(ds.sample_shape),
    }
    with open(path, "wb") as f:
        f.write(_header_bytes(header))
        for s in ds.samples:
            f.write(s.data.astype("<f4").tobytes())
        f.write(np.array(ds.labels, dtype="<u2").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("missing header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("magic") != DATASET_MAGIC:
        raise ValueError(f"bad magic {header.get('magic')!r}")
    count = int(header["count"])
    shape = validate_shape(header["shape"])
    if count < 1:
        raise ValueError("dataset count must be >= 1")
    per = math.prod(shape)
    blob = raw[nl + 1 :]
    need = count * per * 4 + count * 2
    if len(blob) != need:
        raise ValueError(f"payload is {len(blob)} bytes, expected {need}")
    flo = np.frombuffer(blob[: count * per * 4], dtype="<f4").astype(np.float64)
    labels = np.frombuffer(blob[count * per * 4 :], dtype="<u2")
    samples = tuple(Tensor(shape, flo[i * per : (i + 1) * per]) for i in range(count))
    return Dataset(samples, tuple(int(l) for l in labels))
