"""Shared test fixtures: byte-level builders for the binary formats and a
couple of tiny hand-weighted models."""

import struct

import numpy as np
import pytest

from evoattack.model import Dense, Flatten, ModelSpec, Softmax

# documented 2-class linear fixture: flatten(2x2x1) -> dense(4->2) -> softmax
TINY_W = np.array([[0.5, -0.3, 0.2, -0.4], [-0.5, 0.3, -0.2, 0.4]])
TINY_B = np.array([0.1, -0.1])


def gnw_bytes(input_shape, num_classes, layers) -> bytes:
    """Assemble a GNW file from layer tuples, independently of the loader.

    Layer tuples: ("dense", W, b), ("conv", W, b, stride, pad_code),
    ("relu",), ("maxpool", k, stride), ("flatten",), ("softmax",).
    """
    h, w, c = input_shape
    out = bytearray(b"GNW1")
    out += struct.pack("<5I", h, w, c, num_classes, len(layers))
    for layer in layers:
        kind = layer[0]
        if kind == "dense":
            _, weights, bias = layer
            weights = np.asarray(weights)
            out += struct.pack("<B2I", 1, weights.shape[1], weights.shape[0])
            out += np.asarray(weights, "<f4").tobytes()
            out += np.asarray(bias, "<f4").tobytes()
        elif kind == "conv":
            _, weights, bias, stride, pad = layer
            weights = np.asarray(weights)
            oc, ic, kh, kw = weights.shape
            out += struct.pack("<B6I", 2, kh, kw, ic, oc, stride, pad)
            out += np.asarray(weights, "<f4").tobytes()
            out += np.asarray(bias, "<f4").tobytes()
        elif kind == "relu":
            out += struct.pack("<B", 3)
        elif kind == "maxpool":
            out += struct.pack("<B2I", 4, layer[1], layer[2])
        elif kind == "flatten":
            out += struct.pack("<B", 5)
        elif kind == "softmax":
            out += struct.pack("<B", 6)
        else:
            raise AssertionError(f"unknown test layer {kind}")
    return bytes(out)


def idx_bytes(images_u8: np.ndarray, labels: np.ndarray) -> tuple:
    """Big-endian IDX pair for (n, rows, cols) uint8 images and n labels."""
    n, rows, cols = images_u8.shape
    img = struct.pack(">IIII", 0x803, n, rows, cols) + images_u8.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + np.asarray(labels, np.uint8).tobytes()
    return img, lab


def tiny_linear_spec() -> ModelSpec:
    return ModelSpec(
        input_shape=(2, 2, 1),
        num_classes=2,
        layers=(Flatten(), Dense(TINY_W.copy(), TINY_B.copy()), Softmax()),
    )


@pytest.fixture
def tiny_linear_path(tmp_path):
    path = tmp_path / "tiny_linear.gnw"
    path.write_bytes(
        gnw_bytes((2, 2, 1), 2, [("flatten",), ("dense", TINY_W, TINY_B), ("softmax",)])
    )
    return path


def random_linear_spec(rng, shape=(2, 2, 1), num_classes=2, scale=1.0) -> ModelSpec:
    """A random flatten->dense->softmax model for property tests."""
    dim = int(np.prod(shape))
    weights = rng.normal(0, scale, size=(num_classes, dim))
    bias = rng.normal(0, 0.2, size=num_classes)
    return ModelSpec(
        input_shape=shape,
        num_classes=num_classes,
        layers=(Flatten(), Dense(weights, bias), Softmax()),
    )
