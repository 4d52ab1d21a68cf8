"""Input-transformation defenses and the wrapper that attacks see through.

Three transforms: bit-depth reduction, an in-memory JPEG round-trip, and
total-variance minimization on a random pixel subset (the only randomized
one).  A DefendedModel applies the transform before the base forward pass;
query metering still counts one unit per base-model evaluation.

For randomized defenses the fitness becomes an expectation estimated by
sampling, and success requires the target class on several consecutive
fresh draws.
"""

import threading
from dataclasses import dataclass

import numpy as np

from evoattack.engine import compute_fitness_max
from evoattack.model import ModelSpec, QueryMeter, predict_batch

TV_EPS = 1e-6

# 8x8 base quantization tables (luminance / chrominance), row-major
_LUMA_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
_CHROMA_BASE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class DefenseSpec:
    """Which transform guards the model, with its parameters."""

    kind: str = "none"  # none | bit_depth | jpeg | tvm
    bits_kept: int = 5
    quality: int = 75
    dropout_rate: float = 0.5
    tv_weight: float = 0.1
    solver_iters: int = 100

    @property
    def randomized(self) -> bool:
        return self.kind == "tvm"

    def validate(self) -> None:
        if self.kind not in ("none", "bit_depth", "jpeg", "tvm"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "bit_depth" and not 1 <= self.bits_kept <= 8:
            raise ValueError("bits_kept must lie in [1, 8]")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ValueError("quality must lie in [1, 100]")
        if self.kind == "tvm":
            if not 0 <= self.dropout_rate < 1:
                raise ValueError("dropout_rate must lie in [0, 1)")
            if self.tv_weight <= 0:
                raise ValueError("tv_weight must be positive")
            if self.solver_iters < 1:
                raise ValueError("solver_iters must be positive")


def bit_depth_reduce(image, bits_kept: int):
    """Quantize each pixel to 2^bits_kept - 1 levels, ties away from zero."""
    if not 1 <= bits_kept <= 8:
        raise ValueError("bits_kept must lie in [1, 8]")
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    levels = float(2**bits_kept - 1)
    # values are non-negative, so floor(v*L + 0.5) rounds ties away from zero
    return np.floor(x * levels + 0.5) / levels


def _quality_tables(quality: int):
    """Scale the base tables by the conventional quality mapping."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    luma = np.clip((_LUMA_BASE * scale + 50) // 100, 1, 255)
    chroma = np.clip((_CHROMA_BASE * scale + 50) // 100, 1, 255)
    return luma.astype(np.float64), chroma.astype(np.float64)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    d = np.cos(np.pi * (2 * n + 1) * k / 16.0) * np.sqrt(2.0 / 8.0)
    d[0, :] = np.sqrt(1.0 / 8.0)
    return d


_DCT = _dct_matrix()


def _jpeg_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Lossy round-trip of (B, H, W) planes in the 0..255 range."""
    b, h, w = plane.shape
    ph = (-h) % 8
    pw = (-w) % 8
    x = np.pad(plane, ((0, 0), (0, ph), (0, pw)), mode="edge") - 128.0
    bh, bw = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(b, bh, 8, bw, 8).transpose(0, 1, 3, 2, 4)
    coefs = np.einsum("ij,nhwjk,lk->nhwil", _DCT, blocks, _DCT)
    q = np.sign(coefs) * np.floor(np.abs(coefs) / table + 0.5)  # ties away
    deq = q * table
    blocks = np.einsum("ji,nhwjk,kl->nhwil", _DCT, deq, _DCT)
    out = blocks.transpose(0, 1, 3, 2, 4).reshape(b, bh * 8, bw * 8) + 128.0
    return out[:, :h, :w]


def _jpeg_batch(images: np.ndarray, quality: int) -> np.ndarray:
    luma_t, chroma_t = _quality_tables(quality)
    x = images * 255.0
    c = x.shape[3]
    if c == 1:
        y = _jpeg_plane(x[..., 0], luma_t)
        out = y[..., None]
    elif c == 3:
        r, g, b = x[..., 0], x[..., 1], x[..., 2]
        y = 0.299 * r + 0.587 * g + 0.114 * b
        cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
        cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
        y = _jpeg_plane(y, luma_t)
        cb = _jpeg_plane(cb, chroma_t)
        cr = _jpeg_plane(cr, chroma_t)
        r = y + 1.402 * (cr - 128.0)
        g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0)
        b = y + 1.772 * (cb - 128.0)
        out = np.stack([r, g, b], axis=-1)
    else:
        raise ValueError(f"jpeg supports 1 or 3 channels, got {c}")
    return np.clip(out / 255.0, 0.0, 1.0)


def jpeg_roundtrip(image, quality: int):
    """Deterministic in-memory JPEG compress-then-decompress.

    8x8 block DCT per channel, RGB handled in YCbCr without chroma
    subsampling, quantization tables scaled by the quality mapping, edge
    blocks padded by replication, result clamped to [0,1].
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {x.shape}")
    return _jpeg_batch(x[None], quality)[0]


def tv_objective(z, x, mask, tv_weight: float) -> float:
    """Half the masked squared error plus the smoothed isotropic TV term."""
    data = 0.5 * float(np.sum((mask * (z - x)) ** 2))
    dh = np.zeros_like(z)
    dw = np.zeros_like(z)
    dh[:-1, :, :] = z[1:, :, :] - z[:-1, :, :]
    dw[:, :-1, :] = z[:, 1:, :] - z[:, :-1, :]
    tv = float(np.sum(np.sqrt(dh**2 + dw**2 + TV_EPS)))
    return data + tv_weight * tv


def _tv_gradient(z, x, mask, tv_weight: float) -> np.ndarray:
    dh = np.zeros_like(z)
    dw = np.zeros_like(z)
    dh[:-1, :, :] = z[1:, :, :] - z[:-1, :, :]
    dw[:, :-1, :] = z[:, 1:, :] - z[:, :-1, :]
    r = np.sqrt(dh**2 + dw**2 + TV_EPS)
    g = -(dh + dw) / r
    g[1:, :, :] += (dh / r)[:-1, :, :]
    g[:, 1:, :] += (dw / r)[:, :-1, :]
    return mask * (z - x) + tv_weight * g


def tvm_minimize(x, mask, tv_weight: float, iters: int):
    """Projected gradient descent from the masked image.

    Each iteration starts from the nominal step 1/(1+8*lambda) and halves it
    until the objective does not increase, so the returned objective trace is
    monotone by construction.  Returns (solution, objective trace) where the
    trace holds the objective before iterating plus one value per iteration.
    """
    z = np.clip(x * mask, 0.0, 1.0)
    obj = tv_objective(z, x, mask, tv_weight)
    trace = [obj]
    nominal = 1.0 / (1.0 + 8.0 * tv_weight)
    for _ in range(iters):
        grad = _tv_gradient(z, x, mask, tv_weight)
        step = nominal
        for _ in range(40):
            cand = np.clip(z - step * grad, 0.0, 1.0)
            cand_obj = tv_objective(cand, x, mask, tv_weight)
            if cand_obj <= obj:
                z, obj = cand, cand_obj
                break
            step *= 0.5
        trace.append(obj)
    return z, trace


def tvm_reconstruct(image, spec: DefenseSpec, rng):
    """Drop pixels at spec.dropout_rate, then rebuild the image by minimizing
    masked squared error plus total variation."""
    if spec.kind != "tvm":
        raise ValueError("spec.kind must be tvm")
    spec.validate()
    x = np.asarray(image, dtype=np.float64)
    keep = rng.random(x.shape[:2]) >= spec.dropout_rate
    mask = np.repeat(keep[:, :, None], x.shape[2], axis=2).astype(np.float64)
    z, _ = tvm_minimize(x, mask, spec.tv_weight, spec.solver_iters)
    return z


def _transform_batch(images: np.ndarray, spec: DefenseSpec, rng) -> np.ndarray:
    if spec.kind == "none":
        return images
    if spec.kind == "bit_depth":
        return bit_depth_reduce(images, spec.bits_kept)
    if spec.kind == "jpeg":
        return _jpeg_batch(np.clip(images, 0.0, 1.0), spec.quality)
    if spec.kind == "tvm":
        # fresh mask per image, drawn in batch order
        return np.stack([tvm_reconstruct(img, spec, rng) for img in images])
    raise ValueError(f"unknown defense kind {spec.kind!r}")


class DefendedModel:
    """A base classifier behind an input transform, seen query-only."""

    def __init__(
        self,
        base: ModelSpec,
        defense: DefenseSpec,
        rng=None,
        meter: QueryMeter | None = None,
    ):
        defense.validate()
        if defense.randomized and rng is None:
            raise ValueError("randomized defense needs an rng stream")
        self.base = base
        self.defense = defense
        self.rng = rng
        self.meter = meter if meter is not None else QueryMeter()
        self._lock = threading.Lock()

    @property
    def input_shape(self) -> tuple:
        return self.base.input_shape

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    @property
    def queries(self) -> int:
        return self.meter.count

    def predict(self, image) -> np.ndarray:
        return defended_predict(self, image, self.meter)

    def predict_batch(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.base.input_shape:
            raise ValueError(f"batch shape {x.shape} != model input {self.base.input_shape}")
        with self._lock:
            defended = _transform_batch(x, self.defense, self.rng)
        return predict_batch(self.base, defended, self.meter)


def defended_predict(dm: DefendedModel, image, meter: QueryMeter) -> np.ndarray:
    """Transform (with fresh randomness if the defense has any), then predict."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != dm.base.input_shape:
        raise ValueError(f"image shape {x.shape} != model input {dm.base.input_shape}")
    with dm._lock:
        defended = _transform_batch(x[None], dm.defense, dm.rng)
    return predict_batch(dm.base, defended, meter)[0]


def expected_fitness(dm: DefendedModel, image, target: int, n_samples: int, meter) -> float:
    """Mean over n_samples defended predictions of log p_target minus log of
    the runner-up probability.  Costs exactly n_samples queries."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    total = 0.0
    for _ in range(n_samples):
        probs = defended_predict(dm, image, meter)
        total += compute_fitness_max(probs, target)
    return total / n_samples


def confirm_success(dm: DefendedModel, image, target: int, repeats: int, meter) -> bool:
    """True iff `repeats` consecutive fresh defended predictions pick the
    target class.  Short-circuits (and stops spending queries) on the first
    miss."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    for _ in range(repeats):
        if int(np.argmax(defended_predict(dm, image, meter))) != target:
            return False
    return True
