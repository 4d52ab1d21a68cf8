"""Image and noise-grid arithmetic.

Images are float64 arrays of shape (H, W, C) with values in [0, 1].
Noise grids share the layout but live in [-delta_max, +delta_max] and may be
lower resolution than the image they perturb; they are upscaled bilinearly
before being added.
"""

import numpy as np


def _as_grid(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {out.shape}")
    return out


def bilinear_resize(grid, out_h: int, out_w: int) -> np.ndarray:
    """Upscale a (h, w, C) grid to (out_h, out_w, C) with bilinear interpolation.

    Sampling uses half-pixel centers, src = (dst + 0.5) * in/out - 0.5, with
    source coordinates clamped to the grid, so every output value is a convex
    combination of at most four input values.  Only upscaling is supported.
    """
    grid = _as_grid(grid, "grid")
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dimensions must be positive, got {out_h}x{out_w}")
    in_h, in_w, _ = grid.shape
    if out_h < in_h or out_w < in_w:
        raise ValueError(
            f"bilinear_resize only upscales: {in_h}x{in_w} -> {out_h}x{out_w}"
        )

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, tr = axis(in_h, out_h)
    c0, c1, tc = axis(in_w, out_w)

    tr = tr[:, None, None]
    tc = tc[None, :, None]
    top = grid[r0][:, c0] * (1.0 - tc) + grid[r0][:, c1] * tc
    bot = grid[r1][:, c0] * (1.0 - tc) + grid[r1][:, c1] * tc
    return top * (1.0 - tr) + bot * tr


def project_linf(candidate, delta_max: float) -> np.ndarray:
    """Clamp every element into [-delta_max, +delta_max]."""
    if delta_max < 0:
        raise ValueError(f"delta_max must be non-negative, got {delta_max}")
    return np.clip(np.asarray(candidate, dtype=np.float64), -delta_max, delta_max)


def apply_noise(x_orig, noise) -> np.ndarray:
    """Add a (possibly reduced-resolution) noise grid to an image.

    The noise is bilinearly upscaled to the image resolution when needed and
    the sum is clamped into the valid pixel box [0, 1].
    """
    x = _as_grid(x_orig, "x_orig")
    n = _as_grid(noise, "noise")
    if x.shape[2] != n.shape[2]:
        raise ValueError(
            f"channel mismatch: image has {x.shape[2]}, noise has {n.shape[2]}"
        )
    if n.shape[:2] != x.shape[:2]:
        n = bilinear_resize(n, x.shape[0], x.shape[1])
    return np.clip(x + n, 0.0, 1.0)


def linf_distance(a, b) -> float:
    """Maximum absolute per-element difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b)))


def l2_distance_per_pixel(a, b) -> float:
    """Euclidean distance divided by the element count H*W*C."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)) / a.size)
