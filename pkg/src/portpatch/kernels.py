"""Dense float32/float64 kernels that the rest of the package builds on.

Tensors are plain numpy arrays: C-contiguous, rank 1 or 2, dtype float32 or
float64. Results keep the operand dtype while inner accumulations run in
float64, and every reduction has a fixed traversal order so repeated runs
produce identical bytes.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericalError, ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Power iteration defaults. 2000 iterations are needed for ~0.5% singular-value
# gaps to reach 1e-8 relative accuracy; tighter gaps do not occur in this
# package's workloads.
SIGMA_MAX_ITERS = 2000
SIGMA_MAX_TOL = 1e-10

# Dimension cap for the dense SVD path.
SVD_MAX_DIM = 1024


class SvdResult(NamedTuple):
    """Thin SVD a = u @ diag(s) @ v.T with s non-increasing."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def check_tensor(a, name: str = "tensor") -> np.ndarray:
    """Validate an array as a supported tensor (rank 1 or 2, float32/float64)."""
    arr = np.asarray(a)
    if arr.dtype not in SUPPORTED_DTYPES:
        raise ShapeError(f"{name}: unsupported dtype {arr.dtype}, expected float32 or float64")
    if arr.ndim not in (1, 2):
        raise ShapeError(f"{name}: rank {arr.ndim} not supported, expected 1 or 2")
    if arr.size == 0:
        raise ShapeError(f"{name}: empty shape {arr.shape}")
    return np.ascontiguousarray(arr)


def check_matrix(a, name: str = "tensor") -> np.ndarray:
    arr = check_tensor(a, name)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D tensor, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation; result keeps the operand dtype."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch: {a.dtype} x {b.dtype}")
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(a.dtype, copy=False)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = check_tensor(a, "a")
    b = check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = check_tensor(a, "a")
    b = check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    a = check_tensor(a, "a")
    return a * a.dtype.type(factor)


def fro_norm(a: np.ndarray) -> float:
    """Frobenius norm; squares summed in float64 over the row-major buffer."""
    a = check_tensor(a, "a")
    flat = a.astype(np.float64, copy=False).ravel()
    return float(np.sqrt(np.dot(flat, flat)))


def sigma_max(a: np.ndarray, max_iters: int = SIGMA_MAX_ITERS, tol: float = SIGMA_MAX_TOL) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    Starts from a fixed seeded vector and stops once the relative change of
    the Rayleigh quotient drops below tol (or after max_iters sweeps), so the
    result is deterministic. Accurate to ~1e-8 relative against a full SVD.
    """
    a = check_matrix(a, "a")
    if max_iters < 1:
        raise ShapeError(f"sigma_max: max_iters must be >= 1, got {max_iters}")
    work = a.astype(np.float64, copy=False)
    m, n = work.shape
    gram = work @ work.T if m <= n else work.T @ work
    if not np.any(gram):
        return 0.0
    v = seeded_init((gram.shape[0],), seed=0, dist="normal")
    v /= np.linalg.norm(v)
    lam_prev = None
    for _ in range(max_iters):
        w = gram @ v
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0
        lam = float(v @ w)
        v = w / norm_w
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            break
        lam_prev = lam
    lam = float(v @ (gram @ v))
    return float(np.sqrt(max(lam, 0.0)))


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD in float64 with singular values in descending order."""
    a = check_matrix(a, "a")
    if min(a.shape) > SVD_MAX_DIM:
        raise ShapeError(f"svd: min dimension {min(a.shape)} exceeds the {SVD_MAX_DIM} cap")
    try:
        u, s, vh = np.linalg.svd(a.astype(np.float64, copy=False), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge: {exc}") from exc
    return SvdResult(u=u, s=s, v=vh.T.copy())


def numerical_rank(a: np.ndarray, tol: float | None = None) -> int:
    """Count of singular values above tol; auto tol = max(m,n) * eps(dtype) * sigma_max."""
    a = check_matrix(a, "a")
    s = svd(a).s
    if s[0] == 0.0:
        return 0
    if tol is None:
        tol = max(a.shape) * float(np.finfo(a.dtype).eps) * float(s[0])
    return int(np.count_nonzero(s > tol))


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; -inf entries act as masked scores."""
    a = check_matrix(a, "a")
    work = a.astype(np.float64, copy=False)
    shifted = work - np.max(work, axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=1, keepdims=True)
    return out.astype(a.dtype, copy=False)


def layer_norm_rows(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-row standardization (population variance + eps) followed by gain/bias."""
    a = check_matrix(a, "a")
    gain = check_tensor(gain, "gain")
    bias = check_tensor(bias, "bias")
    if gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError(
            f"layer_norm_rows: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match row width {a.shape[1]}"
        )
    work = a.astype(np.float64, copy=False)
    mean = work.mean(axis=1, keepdims=True)
    var = work.var(axis=1, keepdims=True)
    normed = (work - mean) / np.sqrt(var + eps)
    out = normed * gain.astype(np.float64, copy=False) + bias.astype(np.float64, copy=False)
    return out.astype(a.dtype, copy=False)


def seeded_init(
    shape,
    seed: int,
    dist: str = "normal",
    mean: float = 0.0,
    std: float = 1.0,
    low: float = 0.0,
    high: float = 1.0,
    dtype=np.float64,
) -> np.ndarray:
    """Deterministic tensor initialization.

    Streams come from the counter-based Philox4x64 generator keyed via
    numpy's SeedSequence(seed); values are drawn in float64 row-major order
    and then cast, so identical (shape, seed, dist) arguments reproduce
    identical bytes.
    """
    dtype = np.dtype(dtype)
    if dtype not in SUPPORTED_DTYPES:
        raise ShapeError(f"seeded_init: unsupported dtype {dtype}")
    if dist == "zeros":
        return np.zeros(shape, dtype=dtype)
    rng = np.random.Generator(np.random.Philox(seed))
    if dist == "normal":
        out = rng.normal(mean, std, size=shape)
    elif dist == "uniform":
        out = rng.uniform(low, high, size=shape)
    else:
        raise ShapeError(f"seeded_init: unknown dist {dist!r}, expected normal|uniform|zeros")
    return out.astype(dtype, copy=False)
