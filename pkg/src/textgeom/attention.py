"""Criss-cross context attention block: forward, backward, stacking.

One block aggregates features along each pixel's row (horizontal branch)
and column (vertical branch) with sigmoid-activated dot-product attention.
The three 1x1 projections (theta, phi, g) share weights between branches;
the branch outputs and a shortcut copy of the input are concatenated and
reduced back to C channels by a final 1x1 convolution.  Stacking two
blocks lets every pixel reach every other pixel.

Layout is N, H, W, C row-major throughout.  Backward passes are chained by
hand from the primitive op backwards in :mod:`textgeom.tensorops`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensorops import (
    conv1x1,
    conv1x1_backward,
    matmul,
    matmul_backward,
    sigmoid,
    sigmoid_backward,
)


@dataclass
class CabWeights:
    """Projection weights for one attention block.

    theta/phi/g are (C, C) with (C,) biases, shared between the horizontal
    and vertical branches; reduce is (3C, C) with a (C,) bias.
    """

    w_theta: np.ndarray
    b_theta: np.ndarray
    w_phi: np.ndarray
    b_phi: np.ndarray
    w_g: np.ndarray
    b_g: np.ndarray
    w_reduce: np.ndarray
    b_reduce: np.ndarray

    @classmethod
    def seeded(cls, channels: int, seed: int, scale: float = 0.1, dtype=np.float64) -> "CabWeights":
        """Deterministic uniform [-scale, scale] weights, zero biases."""
        rng = np.random.default_rng(seed)
        mk = lambda *shape: rng.uniform(-scale, scale, size=shape).astype(dtype)
        zeros = lambda n: np.zeros(n, dtype=dtype)
        return cls(
            w_theta=mk(channels, channels),
            b_theta=zeros(channels),
            w_phi=mk(channels, channels),
            b_phi=zeros(channels),
            w_g=mk(channels, channels),
            b_g=zeros(channels),
            w_reduce=mk(3 * channels, channels),
            b_reduce=zeros(channels),
        )

    @classmethod
    def passthrough(cls, channels: int, dtype=np.float64) -> "CabWeights":
        """Weights that make the block an exact identity.

        g projects to zero, so both attention outputs vanish, and the
        reduction selects the shortcut slice of the concatenation.
        """
        c = channels
        w_reduce = np.zeros((3 * c, c), dtype=dtype)
        w_reduce[2 * c :, :] = np.eye(c, dtype=dtype)
        eye = np.eye(c, dtype=dtype)
        zeros = lambda n: np.zeros(n, dtype=dtype)
        return cls(
            w_theta=eye.copy(),
            b_theta=zeros(c),
            w_phi=eye.copy(),
            b_phi=zeros(c),
            w_g=np.zeros((c, c), dtype=dtype),
            b_g=zeros(c),
            w_reduce=w_reduce,
            b_reduce=zeros(c),
        )

    def zeros_like(self) -> "CabWeights":
        return CabWeights(**{k: np.zeros_like(v) for k, v in vars(self).items()})


def _check_input(x: np.ndarray, w: CabWeights) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected N,H,W,C input, got shape {x.shape}")
    c = x.shape[-1]
    if w.w_theta.shape != (c, c) or w.w_reduce.shape != (3 * c, c):
        raise ShapeError(
            f"weights for C={w.w_theta.shape[0]} do not match input C={c}"
        )


def _branch_forward(rows: np.ndarray, w: CabWeights):
    """Attention along the last-but-one axis of (B, L, C) row batches."""
    f_theta = conv1x1(rows, w.w_theta, w.b_theta)
    f_phi = conv1x1(rows, w.w_phi, w.b_phi)
    f_g = conv1x1(rows, w.w_g, w.b_g)
    logits = matmul(f_phi, np.swapaxes(f_theta, -1, -2))
    attn = sigmoid(logits)
    out = matmul(attn, f_g)
    return out, (f_theta, f_phi, f_g, attn)


def _branch_backward(rows: np.ndarray, w: CabWeights, cache, d_out: np.ndarray):
    f_theta, f_phi, f_g, attn = cache
    d_attn, d_g = matmul_backward(attn, f_g, d_out)
    d_logits = sigmoid_backward(attn, d_attn)
    d_phi, d_theta_t = matmul_backward(f_phi, np.swapaxes(f_theta, -1, -2), d_logits)
    d_theta = np.swapaxes(d_theta_t, -1, -2)
    dx = np.zeros_like(rows)
    grads = {}
    for name, proj_grad in (("theta", d_theta), ("phi", d_phi), ("g", d_g)):
        dxi, dw, db = conv1x1_backward(rows, getattr(w, f"w_{name}"), proj_grad)
        dx = dx + dxi
        grads[f"w_{name}"] = dw
        grads[f"b_{name}"] = db
    return dx, grads


def _forward_cached(x: np.ndarray, w: CabWeights):
    _check_input(x, w)
    n, h, wd, c = x.shape
    rows_h = x.reshape(n * h, wd, c)
    out_h, cache_h = _branch_forward(rows_h, w)
    out_h = out_h.reshape(n, h, wd, c)

    xt = np.ascontiguousarray(np.swapaxes(x, 1, 2))  # N, W, H, C
    rows_v = xt.reshape(n * wd, h, c)
    out_v, cache_v = _branch_forward(rows_v, w)
    out_v = np.swapaxes(out_v.reshape(n, wd, h, c), 1, 2)

    concat = np.concatenate([out_h, out_v, x], axis=-1)
    y = conv1x1(concat, w.w_reduce, w.b_reduce)
    return y, (rows_h, cache_h, rows_v, cache_v, concat)


def cab_forward(x: np.ndarray, w: CabWeights) -> np.ndarray:
    """Context-attended features, same N,H,W,C shape as the input."""
    y, _ = _forward_cached(x, w)
    return y


def attention_maps(x: np.ndarray, w: CabWeights) -> tuple[np.ndarray, np.ndarray]:
    """The sigmoid attention maps of both branches, for inspection/tests.

    Shapes: (N*H, W, W) horizontal and (N*W, H, H) vertical.
    """
    _check_input(x, w)
    n, h, wd, c = x.shape
    _, cache_h = _branch_forward(x.reshape(n * h, wd, c), w)
    xt = np.ascontiguousarray(np.swapaxes(x, 1, 2))
    _, cache_v = _branch_forward(xt.reshape(n * wd, h, c), w)
    return cache_h[3], cache_v[3]


def cab_backward(x: np.ndarray, w: CabWeights, upstream: np.ndarray):
    """Exact analytic gradients of cab_forward.

    Returns (grad_x, grad_w) with grad_w a CabWeights of the same shapes.
    Branch weight gradients accumulate because the branches share weights.
    """
    if not np.all(np.isfinite(upstream)):
        raise NumericError("non-finite upstream gradient")
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match input {x.shape}")
    n, h, wd, c = x.shape
    _, (rows_h, cache_h, rows_v, cache_v, concat) = _forward_cached(x, w)

    d_concat, dw_reduce, db_reduce = conv1x1_backward(concat, w.w_reduce, upstream)
    d_out_h = d_concat[..., :c]
    d_out_v = d_concat[..., c : 2 * c]
    dx = d_concat[..., 2 * c :].copy()

    dxh, grads_h = _branch_backward(rows_h, w, cache_h, d_out_h.reshape(n * h, wd, c))
    dx += dxh.reshape(n, h, wd, c)

    d_out_v_t = np.ascontiguousarray(np.swapaxes(d_out_v, 1, 2)).reshape(n * wd, h, c)
    dxv, grads_v = _branch_backward(rows_v, w, cache_v, d_out_v_t)
    dx += np.swapaxes(dxv.reshape(n, wd, h, c), 1, 2)

    grad_w = CabWeights(
        w_theta=grads_h["w_theta"] + grads_v["w_theta"],
        b_theta=grads_h["b_theta"] + grads_v["b_theta"],
        w_phi=grads_h["w_phi"] + grads_v["w_phi"],
        b_phi=grads_h["b_phi"] + grads_v["b_phi"],
        w_g=grads_h["w_g"] + grads_v["w_g"],
        b_g=grads_h["b_g"] + grads_v["b_g"],
        w_reduce=dw_reduce,
        b_reduce=db_reduce,
    )
    return dx, grad_w


def cab_stack2(x: np.ndarray, w1: CabWeights, w2: CabWeights) -> np.ndarray:
    """Two serially connected blocks: full-image receptive field."""
    return cab_forward(cab_forward(x, w1), w2)
