"""Scores-only classifier: GNW weight files, forward pass, query metering.

The attacker sees a classifier purely as a function from an image to a
probability vector; logits, weights and gradients stay hidden behind
:class:`BlackBox`.  Every single-image evaluation bumps a :class:`QueryMeter`,
which is the attack's cost metric.

GNW weight file layout (little-endian):

    magic   4 bytes  "GNW1"
    header  u32 input_height, u32 input_width, u32 input_channels,
            u32 num_classes, u32 layer_count
    layers  u8 tag, then per tag:
        1 dense    u32 in, u32 out, f32 weights[out*in] (row-major, (out, in)),
                   f32 bias[out]
        2 conv2d   u32 kh, u32 kw, u32 in_c, u32 out_c, u32 stride,
                   u32 padding (0 = same, 1 = valid),
                   f32 weights[out_c*in_c*kh*kw] (row-major, (out_c, in_c, kh, kw)),
                   f32 bias[out_c]
        3 relu     (no payload)
        4 maxpool  u32 k, u32 stride   (valid padding)
        5 flatten  (no payload)
        6 softmax  (no payload; must be the final layer)

Shapes are validated eagerly on load: the layer chain must carry the declared
input shape to exactly num_classes outputs, ending in softmax.
"""

import struct
import threading
from dataclasses import dataclass

import numpy as np

GNW_MAGIC = b"GNW1"

TAG_DENSE = 1
TAG_CONV2D = 2
TAG_RELU = 3
TAG_MAXPOOL = 4
TAG_FLATTEN = 5
TAG_SOFTMAX = 6

PAD_SAME = 0
PAD_VALID = 1


class FormatError(ValueError):
    """A binary file (GNW weights, IDX dataset, PGM/PPM image) is malformed."""


@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass(frozen=True)
class Conv2D:
    weights: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int
    padding: str  # "same" | "valid"


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool2D:
    k: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


def _conv_out(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)  # ceil
    out = (size - k) // stride + 1
    if out < 1:
        raise FormatError(f"kernel {k} does not fit input of size {size}")
    return out


@dataclass
class ModelSpec:
    """A validated feed-forward classifier description."""

    input_shape: tuple  # (H, W, C)
    num_classes: int
    layers: tuple

    def validate(self) -> None:
        h, w, c = self.input_shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise FormatError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise FormatError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise FormatError("final layer must be softmax")
        shape = ("hwc", h, w, c)
        for i, layer in enumerate(self.layers):
            shape = self._step(shape, layer, i)
        if shape != ("flat", self.num_classes):
            raise FormatError(
                f"layer chain produces {shape}, expected {self.num_classes} classes"
            )

    @staticmethod
    def _step(shape, layer, index: int):
        def bad(msg: str):
            return FormatError(f"layer {index}: {msg} (incoming shape {shape})")

        if isinstance(layer, Flatten):
            if shape[0] != "hwc":
                raise bad("flatten expects an image")
            return ("flat", shape[1] * shape[2] * shape[3])
        if isinstance(layer, Dense):
            out_dim, in_dim = layer.weights.shape
            if shape != ("flat", in_dim):
                raise bad(f"dense expects a flat vector of {in_dim}")
            if layer.bias.shape != (out_dim,):
                raise bad("dense bias shape mismatch")
            return ("flat", out_dim)
        if isinstance(layer, Conv2D):
            if shape[0] != "hwc":
                raise bad("conv2d expects an image")
            out_c, in_c, kh, kw = layer.weights.shape
            if shape[3] != in_c:
                raise bad(f"conv2d expects {in_c} channels")
            if layer.bias.shape != (out_c,):
                raise bad("conv2d bias shape mismatch")
            if layer.stride < 1 or layer.padding not in ("same", "valid"):
                raise bad("bad conv2d stride/padding")
            try:
                oh = _conv_out(shape[1], kh, layer.stride, layer.padding)
                ow = _conv_out(shape[2], kw, layer.stride, layer.padding)
            except FormatError as exc:
                raise bad(str(exc))
            return ("hwc", oh, ow, out_c)
        if isinstance(layer, MaxPool2D):
            if shape[0] != "hwc":
                raise bad("maxpool expects an image")
            if layer.k < 1 or layer.stride < 1:
                raise bad("bad maxpool window/stride")
            try:
                oh = _conv_out(shape[1], layer.k, layer.stride, "valid")
                ow = _conv_out(shape[2], layer.k, layer.stride, "valid")
            except FormatError as exc:
                raise bad(str(exc))
            return ("hwc", oh, ow, shape[3])
        if isinstance(layer, Relu):
            return shape
        if isinstance(layer, Softmax):
            if shape[0] != "flat":
                raise bad("softmax expects a flat vector")
            return shape
        raise bad(f"unknown layer type {type(layer).__name__}")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.pos = 0
        self.layer = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file in {self.layer}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32s(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)


def load_model(path) -> ModelSpec:
    """Parse and validate a GNW weight file."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, str(path))
    if r.take(4) != GNW_MAGIC:
        raise FormatError(f"{path}: bad magic, not a GNW file")
    h, w, c, k, n_layers = (r.u32() for _ in range(5))
    layers = []
    for i in range(n_layers):
        r.layer = f"layer {i}"
        tag = r.u8()
        if tag == TAG_DENSE:
            in_dim, out_dim = r.u32(), r.u32()
            if in_dim < 1 or out_dim < 1:
                raise FormatError(f"{path}: layer {i}: bad dense dims {in_dim}x{out_dim}")
            weights = r.f32s(out_dim * in_dim).reshape(out_dim, in_dim)
            bias = r.f32s(out_dim)
            layers.append(Dense(weights, bias))
        elif tag == TAG_CONV2D:
            kh, kw, in_c, out_c, stride, pad = (r.u32() for _ in range(6))
            if pad not in (PAD_SAME, PAD_VALID):
                raise FormatError(f"{path}: layer {i}: bad padding code {pad}")
            if min(kh, kw, in_c, out_c, stride) < 1:
                raise FormatError(f"{path}: layer {i}: bad conv2d shape fields")
            weights = r.f32s(out_c * in_c * kh * kw).reshape(out_c, in_c, kh, kw)
            bias = r.f32s(out_c)
            layers.append(
                Conv2D(weights, bias, stride, "same" if pad == PAD_SAME else "valid")
            )
        elif tag == TAG_RELU:
            layers.append(Relu())
        elif tag == TAG_MAXPOOL:
            pool_k, stride = r.u32(), r.u32()
            layers.append(MaxPool2D(pool_k, stride))
        elif tag == TAG_FLATTEN:
            layers.append(Flatten())
        elif tag == TAG_SOFTMAX:
            layers.append(Softmax())
        else:
            raise FormatError(f"{path}: layer {i}: unknown layer tag {tag}")
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after layers")
    spec = ModelSpec(input_shape=(h, w, c), num_classes=k, layers=tuple(layers))
    try:
        spec.validate()
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}")
    return spec


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction before exponentiation)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of empty input")
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Run (B, H, W, C) through the layer chain, returning (B, K)."""
    x = batch
    for layer in spec.layers:
        if isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            x = x @ layer.weights.T + layer.bias
        elif isinstance(layer, Relu):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Conv2D):
            x = _conv2d(x, layer)
        elif isinstance(layer, MaxPool2D):
            x = _maxpool2d(x, layer)
        elif isinstance(layer, Softmax):
            x = softmax(x)
    return x


def _conv2d(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    out_c, in_c, kh, kw = layer.weights.shape
    s = layer.stride
    b, h, w, _ = x.shape
    oh = _conv_out(h, kh, s, layer.padding)
    ow = _conv_out(w, kw, s, layer.padding)
    if layer.padding == "same":
        ph = max((oh - 1) * s + kh - h, 0)
        pw = max((ow - 1) * s + kw - w, 0)
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    out = np.broadcast_to(layer.bias, (b, oh, ow, out_c)).copy()
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i : i + oh * s : s, j : j + ow * s : s, :]  # (b, oh, ow, in_c)
            out += patch @ layer.weights[:, :, i, j].T
    return out


def _maxpool2d(x: np.ndarray, layer: MaxPool2D) -> np.ndarray:
    k, s = layer.k, layer.stride
    b, h, w, c = x.shape
    oh = _conv_out(h, k, s, "valid")
    ow = _conv_out(w, k, s, "valid")
    out = np.full((b, oh, ow, c), -np.inf)
    for i in range(k):
        for j in range(k):
            np.maximum(out, x[:, i : i + oh * s : s, j : j + ow * s : s, :], out=out)
    return out


class QueryMeter:
    """Thread-safe monotone counter of single-image model evaluations."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def increment(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("meter can only move forward")
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        return self._count


def predict(model: ModelSpec, image, meter: QueryMeter) -> np.ndarray:
    """Evaluate one image, returning its probability vector; meter +1."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ValueError(f"image shape {x.shape} != model input {model.input_shape}")
    probs = _forward_batch(model, x[None])[0]
    meter.increment(1)
    return probs


def predict_batch(model: ModelSpec, images, meter: QueryMeter) -> np.ndarray:
    """Evaluate (B, H, W, C) images; the meter counts one query per image."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ValueError(f"batch shape {x.shape} != model input {model.input_shape}")
    probs = _forward_batch(model, x)
    meter.increment(x.shape[0])
    return probs


class BlackBox:
    """The attacker-facing view of a classifier.

    Exposes only prediction and meter reads, plus the externally observable
    facts (input shape, class count).  Weights and intermediate activations
    are unreachable through this surface.
    """

    def __init__(self, spec: ModelSpec, meter: QueryMeter | None = None):
        self._spec = spec
        self.meter = meter if meter is not None else QueryMeter()

    @property
    def input_shape(self) -> tuple:
        return self._spec.input_shape

    @property
    def num_classes(self) -> int:
        return self._spec.num_classes

    @property
    def queries(self) -> int:
        return self.meter.count

    def predict(self, image) -> np.ndarray:
        return predict(self._spec, image, self.meter)

    def predict_batch(self, images) -> np.ndarray:
        return predict_batch(self._spec, images, self.meter)
