"""Continuous-factor bilinear rescaling.

Conventions (they change numerical values, so they are fixed here):

* downscaled extents are ``round(extent * factor)`` with ties rounded away
  from zero, clamped to at least 1;
* sampling uses half-pixel centres, ``src = (dst + 0.5) * in / out - 0.5``,
  with sample positions clamped to the valid range (edge replication);
* upsampling never uses ``1 / factor`` directly: the decoder resizes to the
  exact extent of the skip connection it is concatenated with.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .tensor import Tensor, make_result, record_flops

__all__ = ["target_size", "interp_matrix", "bilinear_resize", "upsample_to_match"]


def target_size(extent: int, factor: float) -> int:
    """Extent of a downscaled axis: ``max(1, round_half_away(extent * factor))``."""
    if extent < 1:
        raise ValueError(f"extent must be >= 1, got {extent}")
    if not factor > 0:
        raise ValueError(f"rescaling factor must be > 0, got {factor}")
    return max(1, int(math.floor(extent * factor + 0.5)))


@lru_cache(maxsize=512)
def _interp_matrix64(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """1-D resampling operator R with ``out = R @ in`` (shape ``[n_out, n_in]``)."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    return _interp_matrix64(n_in, n_out).astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes of ``x`` [B, C, H, W] to (out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got ({out_h}, {out_w})")
    b, c, h, w = x.shape
    # counted even when it is an identity, matching the analytic cost model
    record_flops(8 * b * c * out_h * out_w)
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return np.matmul(np.matmul(ry.T, g), rx),

    return make_result(out, (x,), backward, "bilinear_resize")


def upsample_to_match(x: Tensor, skip: Tensor) -> Tensor:
    """Resize ``x`` to the spatial extent of ``skip`` so the two can be concatenated."""
    return bilinear_resize(x, skip.shape[2], skip.shape[3])
