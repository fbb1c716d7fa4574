"""Dense tensor primitives with hand-written backward passes.

A tensor here is a plain row-major numpy array (float32 for pipeline
storage, float64 for verification).  There is no autodiff graph: every op
exposes an explicit backward, and composites chain them by hand, so each
gradient can be checked in isolation.  Float32 inputs are accumulated in
float64 inside matmul-style reductions and cast back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

SMAP_MAGIC = b"SMAP"
SMAP_VERSION = 1
SMAP_DTYPE_F32 = 0


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one central-difference comparison."""

    max_rel_err: float
    worst_index: tuple[int, ...]
    passed: bool


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite values in tensor")


def _result_dtype(*arrays):
    return np.result_type(*(a.dtype for a in arrays))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product [.., M, K] x [.., K, N] -> [.., M, N].

    Float32 operands are accumulated in float64 and cast back.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_dtype = _result_dtype(a, b)
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(out_dtype)


def matmul_backward(a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    """Gradients of matmul w.r.t. both operands."""
    _check_finite(upstream)
    ta = np.swapaxes(a, -1, -2)
    tb = np.swapaxes(b, -1, -2)
    da = matmul(upstream, tb)
    db = matmul(ta, upstream)
    return da, db


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise 1 / (1 + exp(-x)), overflow-safe at both tails."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out.astype(_result_dtype(x), copy=False)


def sigmoid_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output y."""
    _check_finite(upstream)
    return upstream * y * (1.0 - y)


def conv1x1(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel affine map over channels: [N,H,W,Cin] x [Cin,Cout] + [Cout]."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim < 1 or w.ndim != 2:
        raise ShapeError(f"conv1x1 expects (..., Cin) x (Cin, Cout), got {x.shape} x {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape[-1]} vs weight {w.shape[0]}")
    out_dtype = _result_dtype(x, w)
    out = np.matmul(x.astype(np.float64), w.astype(np.float64))
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match Cout {w.shape[1]}")
        out = out + bias.astype(np.float64)
    return out.astype(out_dtype)


def conv1x1_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    """Gradients of conv1x1 w.r.t. input, weight and bias."""
    _check_finite(upstream)
    up64 = upstream.astype(np.float64)
    dx = np.matmul(up64, w.astype(np.float64).T).astype(_result_dtype(x, w))
    flat_x = x.reshape(-1, x.shape[-1]).astype(np.float64)
    flat_up = up64.reshape(-1, upstream.shape[-1])
    dw = (flat_x.T @ flat_up).astype(_result_dtype(x, w))
    db = flat_up.sum(axis=0).astype(_result_dtype(x, w))
    return dx, dw, db


def grad_check(fn, inputs, epsilon: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn(*inputs)`` must return ``(loss, grads)`` where ``loss`` is a scalar
    and ``grads`` matches ``inputs``.  Evaluation is promoted to float64 so
    the comparison noise floor sits well below the tolerance.  The relative
    error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs64 = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    loss, grads = fn(*inputs64)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in grad_check")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    for g, x in zip(grads, inputs64):
        if g.shape != x.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match input {x.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite analytic gradient")

    max_rel = 0.0
    worst: tuple[int, ...] = (0,)
    for idx, x in enumerate(inputs64):
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp, _ = fn(*inputs64)
            flat[j] = orig - epsilon
            lm, _ = fn(*inputs64)
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during finite differencing")
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = grads[idx].reshape(-1)[j]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            if rel > max_rel:
                max_rel = rel
                worst = (idx,) + np.unravel_index(j, x.shape)
    return GradCheckReport(max_rel_err=float(max_rel), worst_index=worst, passed=max_rel < tol)


def scalarize(forward, backward, project):
    """Wrap a tensor-valued op into a grad_check-compatible scalar function.

    ``forward(*inputs)`` returns the op output, ``backward(*inputs, upstream)``
    its input gradients, and ``project`` is a fixed tensor dotted with the
    output to form the scalar loss (so upstream = project).
    """

    def fn(*inputs):
        out = forward(*inputs)
        loss = float(np.sum(out * project))
        grads = backward(*inputs, project)
        return loss, grads

    return fn


# ---------------------------------------------------------------------------
# SMAP container: magic "SMAP", u8 version, u8 dtype (0 = float32),
# u16 ndim (LE), ndim x u32 dims (LE), raw little-endian row-major payload.
# ---------------------------------------------------------------------------


def smap_write(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<4sBBH", SMAP_MAGIC, SMAP_VERSION, SMAP_DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes())


def smap_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated SMAP header")
    magic, version, dtype, ndim = struct.unpack_from("<4sBBH", raw, 0)
    if magic != SMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SMAP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype != SMAP_DTYPE_F32:
        raise ValueError(f"{path}: unsupported dtype code {dtype}")
    if len(raw) < 8 + 4 * ndim:
        raise ValueError(f"{path}: truncated dimension list")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(shape)) if ndim else 1
    payload = raw[8 + 4 * ndim :]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload size {len(payload)} != expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
