"""Dense float32 kernels backing the transformer forward pass.

Everything operates on row-major float32 ndarrays.  Matrix products
accumulate in float64 and round once back to float32, so a forward pass
produces bit-identical results for a fixed input regardless of BLAS
blocking or thread count.
"""

from __future__ import annotations

import math

import numpy as np

F32 = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(data, dims=None) -> np.ndarray:
    """Coerce data to a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=F32)
    if dims is not None:
        arr = arr.reshape(dims)
    return arr


def check_finite(x: np.ndarray, context: str = "tensor") -> None:
    """Raise ValueError if x contains NaN or Inf."""
    if not np.isfinite(x).all():
        raise ValueError(f"non-finite values in {context}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, stored as float32.

    Accepts stacked operands with broadcast leading dims, numpy-style.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(F32)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability.

    Row sums are normalised against a float64 accumulator so each row
    sums to 1 well within float32 rounding.
    """
    if np.isnan(a).any():
        raise ValueError("NaN in softmax input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(F32)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-6) -> np.ndarray:
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm param shape mismatch: x {x.shape}, "
            f"gamma {gamma.shape}, beta {beta.shape}")
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    normed = (x64 - mu) / np.sqrt(var + eps)
    return (normed * gamma + beta).astype(F32)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU activation, tanh approximation."""
    x = x.astype(F32, copy=False)
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))).astype(F32)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two 1-d vectors.

    If either vector has zero norm the similarity is defined as 0.
    """
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"cosine_similarity needs matching 1-d vectors, got {u.shape} x {v.shape}")
    u64 = u.astype(np.float64)
    v64 = v.astype(np.float64)
    nu = np.linalg.norm(u64)
    nv = np.linalg.norm(v64)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u64, v64) / (nu * nv), -1.0, 1.0))
