"""Dense numeric kernels shared by the runtime and the metrics.

Arrays are stored as float32. Reductions (matrix products, layer-norm
statistics, softmax normalisers) accumulate in float64 and round back once.
Every function accepts a single vector or a 2-D stack of row vectors and
operates along the last axis.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DegenerateInputError

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64

_GELU_COEF = math.sqrt(2.0 / math.pi)


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{op}: non-finite values in result")
    return x


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a row-major float32 matrix, optionally from flat data plus a shape."""
    arr = np.asarray(data, dtype=STORAGE_DTYPE)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ContractError(f"data length {arr.size} != {rows} x {cols}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned as float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise ContractError(f"matmul: unsupported shapes {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul: dimension mismatch {a.shape} x {b.shape}")
    out = a.astype(ACCUM_DTYPE, copy=False) @ b.astype(ACCUM_DTYPE, copy=False)
    return _check_finite(out.astype(STORAGE_DTYPE), "matmul")


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    x = np.asarray(x)
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: dimension mismatch {x.shape} x {weight.shape}")
    out = x.astype(ACCUM_DTYPE, copy=False) @ weight.astype(ACCUM_DTYPE, copy=False)
    if bias is not None:
        out += bias
    return _check_finite(out.astype(STORAGE_DTYPE), "linear")


def log_softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Float64 log-probabilities of ``v / temperature`` along the last axis."""
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    x = np.asarray(v, dtype=ACCUM_DTYPE) / temperature
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax: non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Probability vector(s) of ``v / temperature`` computed with max subtraction.

    Returned in float64; probabilities feed the metrics directly and the
    extra precision keeps small tail probabilities from rounding to zero.
    """
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    x = np.asarray(v, dtype=ACCUM_DTYPE) / temperature
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax: non-finite input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(v: np.ndarray, gain: np.ndarray, bias: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Normalise with population variance, then scale by ``gain`` and shift by ``bias``."""
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    x = np.asarray(v, dtype=ACCUM_DTYPE)
    if x.shape[-1] != np.shape(gain)[-1] or x.shape[-1] != np.shape(bias)[-1]:
        raise ContractError(
            f"layer_norm: length mismatch {x.shape[-1]} vs gain {np.shape(gain)} / bias {np.shape(bias)}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + epsilon) * gain + bias
    return _check_finite(out.astype(STORAGE_DTYPE), "layer_norm")


def gelu(v: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU, the variant the GPT-2 checkpoints were trained with."""
    x = np.asarray(v, dtype=ACCUM_DTYPE)
    out = 0.5 * x * (1.0 + np.tanh(_GELU_COEF * (x + 0.044715 * x**3)))
    return out.astype(STORAGE_DTYPE)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = np.asarray(a, dtype=ACCUM_DTYPE).ravel()
    b64 = np.asarray(b, dtype=ACCUM_DTYPE).ravel()
    if a64.shape != b64.shape:
        raise ContractError(f"cosine: length mismatch {a64.shape} vs {b64.shape}")
    na = np.linalg.norm(a64)
    nb = np.linalg.norm(b64)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


def argmax_lowest(v: np.ndarray) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    # np.argmax already returns the first occurrence of the maximum.
    return int(np.argmax(np.asarray(v)))
