"""Layer operations with reverse-mode gradients.

Every op takes :class:`~covct.tensor.Tensor` inputs, returns a new Tensor and
records a backward closure on the active tape.  Layouts are NCHW throughout.

Conventions:

* ``conv2d`` is cross-correlation (no kernel flip).
* 2x2 max pooling breaks ties by first occurrence in row-major window order.
* ReLU has subgradient 0 at 0.
* Cross-entropy clamps the true-class probability at ``PROB_FLOOR``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CorruptIndexError, DegenerateBatchError, ParameterError, ShapeError
from .tensor import Tensor, record

PROB_FLOOR = 1e-12


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


@dataclass
class ConvParams:
    weights: Tensor  # (out_c, in_c, kh, kw)
    bias: Tensor  # (out_c,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be (outC, inC, kH, kW), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias must have length {self.weights.shape[0]}, got {self.bias.shape}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ParameterError(f"invalid stride {self.stride} / padding {self.padding}")


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    stat_momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batch-norm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if self.epsilon < 0:
            raise ParameterError("batch-norm epsilon must be non-negative")
        if not 0.0 < self.stat_momentum < 1.0:
            raise ParameterError("batch-norm stat_momentum must lie in (0, 1)")


@dataclass
class IndexMap:
    """Flat argmax positions (into H*W of the pooled input) per output element."""

    indices: np.ndarray  # int64, (N, C, H/2, W/2)
    input_shape: tuple[int, int, int, int]


# --------------------------------------------------------------------- conv


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _require_rank(x, 4, "conv2d")
    n, c, h, w = x.shape
    oc, ic, kh, kw = p.weights.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {ic} (weights {p.weights.shape})")
    sh, sw = p.stride
    ph, pw = p.padding
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {p.padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # columns laid out (C*kh*kw, N*Ho*Wo): the copy streams along the width axis
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = p.weights.data.reshape(oc, -1)
    out = wmat @ cols
    out += p.bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(oc, n, ho, wo).transpose(1, 0, 2, 3))
    result = Tensor(out)

    def backward_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(oc, -1)
        dw = (gm @ cols.T).reshape(p.weights.shape)
        db = gm.sum(axis=1)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3))
        return dx, dw, db

    return record("conv2d", (x, p.weights, p.bias), result, backward_fn)


# --------------------------------------------------------------- batch norm


def batch_norm(x: Tensor, p: BatchNormParams, mode: str = "train") -> Tensor:
    """Per-channel normalization followed by the affine map gamma * xhat + beta.

    Train mode normalizes with batch statistics and folds them into the
    running estimates (unbiased variance); eval mode uses the running estimates.
    """
    _require_rank(x, 4, "batch_norm")
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but parameters sized {p.gamma.shape}")
    xd = x.data
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    count = n * h * w

    if mode == "train":
        if count < 2:
            raise DegenerateBatchError(
                f"batch_norm in train mode needs >= 2 values per channel, got N*H*W={count}"
            )
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = centered * inv_std
        m = p.stat_momentum
        unbiased = var.reshape(c) * (count / (count - 1))
        p.running_mean.data = ((1 - m) * p.running_mean.data + m * mean.reshape(c)).astype(xd.dtype)
        p.running_var.data = ((1 - m) * p.running_var.data + m * unbiased).astype(xd.dtype)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(p.running_var.data.reshape(1, c, 1, 1) + p.epsilon)
        xhat = (xd - p.running_mean.data.reshape(1, c, 1, 1)) * inv_std
    else:
        raise ParameterError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    out = Tensor((gamma * xhat + beta).astype(xd.dtype, copy=False))

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * gamma
            if mode == "train":
                dx = inv_std * (
                    dxhat
                    - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return record("batch_norm", (x, p.gamma, p.beta), out, backward_fn, mode=mode)


# ------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, x.data.dtype.type(0)))
    return record("relu", (x,), out, lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(probs)

    def backward_fn(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, backward_fn)


def dropout(x: Tensor, rate: float, mode: str = "train", rng_seed=0) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    out = Tensor(x.data * mask)
    return record("dropout", (x,), out, lambda g: (g * mask,))


# ----------------------------------------------------------------- pooling


def _check_poolable(x: Tensor, op: str) -> tuple[int, int, int, int]:
    _require_rank(x, 4, op)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"{op}: spatial extents {h}x{w} must be divisible by 2")
    return n, c, h, w


def _windows(xd: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,C,H/2,W/2,4) with window entries in row-major order."""
    n, c, h, w = xd.shape
    return xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def max_pool2d(x: Tensor) -> tuple[Tensor, IndexMap]:
    """2x2/stride-2 max pooling; also returns the argmax positions for unpooling."""
    n, c, h, w = _check_poolable(x, "max_pool2d")
    v = _windows(x.data)
    k = v.argmax(axis=-1)
    pooled = np.take_along_axis(v, k[..., None], axis=-1)[..., 0]
    ho, wo = h // 2, w // 2
    rows = 2 * np.arange(ho)[:, None] + k // 2
    cols = 2 * np.arange(wo)[None, :] + k % 2
    flat = (rows * w + cols).astype(np.int64)
    index_map = IndexMap(flat, (n, c, h, w))
    out = Tensor(np.ascontiguousarray(pooled))

    def backward_fn(g):
        dx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(dx, flat.reshape(n, c, -1), g.reshape(n, c, -1), axis=2)
        return (dx.reshape(n, c, h, w),)

    return record("max_pool2d", (x,), out, backward_fn, indices=index_map), index_map


def avg_pool2d(x: Tensor) -> Tensor:
    n, c, h, w = _check_poolable(x, "avg_pool2d")
    xd = x.data
    # fixed summation order: row-major within each window
    s = xd[:, :, 0::2, 0::2] + xd[:, :, 0::2, 1::2] + xd[:, :, 1::2, 0::2] + xd[:, :, 1::2, 1::2]
    out = Tensor(s * xd.dtype.type(0.25))

    def backward_fn(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return record("avg_pool2d", (x,), out, backward_fn)


def max_unpool2d(x: Tensor, indices: IndexMap, out_shape=None) -> Tensor:
    """Scatter ``x`` to the positions stored in ``indices``; zeros elsewhere."""
    _require_rank(x, 4, "max_unpool2d")
    if x.shape != indices.indices.shape:
        raise ShapeError(f"max_unpool2d: input {x.shape} does not match index map {indices.indices.shape}")
    if out_shape is None:
        out_shape = indices.input_shape
    n, c, h, w = out_shape
    if (n, c) != x.shape[:2]:
        raise ShapeError(f"max_unpool2d: output shape {tuple(out_shape)} incompatible with input {x.shape}")
    flat = indices.indices.reshape(n, c, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= h * w):
        raise CorruptIndexError(f"max_unpool2d: index outside output plane of {h}x{w}")
    out = np.zeros((n, c, h * w), dtype=x.dtype)
    np.put_along_axis(out, flat, x.data.reshape(n, c, -1), axis=2)
    result = Tensor(out.reshape(n, c, h, w))

    def backward_fn(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat, axis=2).reshape(x.shape),)

    return record("max_unpool2d", (x,), result, backward_fn)


def avg_unpool2d(x: Tensor, out_shape=None) -> Tensor:
    """Nearest-neighbour 2x expansion, the decoder-side counterpart of avg_pool2d."""
    _require_rank(x, 4, "avg_unpool2d")
    n, c, h, w = x.shape
    if out_shape is not None and tuple(out_shape) != (n, c, 2 * h, 2 * w):
        raise ShapeError(f"avg_unpool2d: output shape {tuple(out_shape)} must be {(n, c, 2 * h, 2 * w)}")
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("avg_unpool2d", (x,), out, backward_fn)


# ------------------------------------------------------------------- dense


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    return record("flatten", (x,), out, lambda g: (g.reshape(shape),))


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map per sample; ``weights`` is (out_features, in_features)."""
    if x.ndim != 2:
        raise ShapeError(f"fully_connected expects (N, features), got {x.shape}; flatten first")
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected: weights {weights.shape} incompatible with input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} must be ({weights.shape[0]},)")
    out = Tensor(x.data @ weights.data.T + bias.data)

    def backward_fn(g):
        dx = g @ weights.data if x.requires_grad else None
        return dx, g.T @ x.data, g.sum(axis=0)

    return record("fully_connected", (x, weights, bias), out, backward_fn)


# ------------------------------------------------------- elementwise / misc


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def fuse(a: Tensor, b: Tensor, alpha: float = 0.5) -> Tensor:
    """Weighted elementwise blend ``alpha * a + (1 - alpha) * b``; 0.5 is the mean."""
    if a.shape != b.shape:
        raise ShapeError(f"fuse: shapes {a.shape} and {b.shape} differ")
    wa = a.dtype.type(alpha)
    wb = a.dtype.type(1.0 - alpha)
    out = Tensor(wa * a.data + wb * b.data)
    return record("fuse", (a, b), out, lambda g: (wa * g, wb * g))


def pad2d(x: Tensor, pads) -> Tensor:
    """Zero padding; ``pads`` is (top, bottom, left, right)."""
    _require_rank(x, 4, "pad2d")
    top, bottom, left, right = (int(v) for v in pads)
    if min(top, bottom, left, right) < 0:
        raise ParameterError(f"pad2d: negative padding {pads}")
    h, w = x.shape[2:]
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))))
    return record("pad2d", (x,), out, lambda g: (g[:, :, top : top + h, left : left + w],))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; a generic probe loss for gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    out = Tensor(np.asarray((x.data * weights).sum(), dtype=x.dtype))
    return record("weighted_sum", (x,), out, lambda g: (g * weights,))


# -------------------------------------------------------------------- loss


def cross_entropy_loss(probs: Tensor, targets, class_weights=None) -> Tensor:
    """Mean of ``-w[y] * log p[y]`` over samples (N,C) or pixels (N,C,H,W).

    ``probs`` must already be normalized along axis 1.  ``class_weights`` is an
    optional length-C sequence; absent means every weight is 1.
    """
    targets = np.asarray(targets)
    if probs.ndim < 2:
        raise ShapeError(f"cross_entropy_loss expects (N, C, ...) probabilities, got {probs.shape}")
    expected = probs.shape[:1] + probs.shape[2:]
    if targets.shape != expected:
        raise ShapeError(f"cross_entropy_loss: targets shape {targets.shape} != {expected}")
    n_cls = probs.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise ParameterError(f"cross_entropy_loss: targets must lie in [0, {n_cls})")
    t = targets.astype(np.int64)[:, None]
    p_true = np.take_along_axis(probs.data, t, axis=1)
    clamped = p_true < PROB_FLOOR
    terms = -np.log(np.maximum(p_true, probs.dtype.type(PROB_FLOOR)))
    w = None
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=probs.dtype)
        if cw.shape != (n_cls,):
            raise ShapeError(f"class_weights must have length {n_cls}")
        w = cw[t]
        terms = w * terms
    count = terms.size
    out = Tensor(np.asarray(terms.mean(), dtype=probs.dtype))

    def backward_fn(g):
        gp = -g / (count * p_true)
        if w is not None:
            gp = gp * w
        gp = np.where(clamped, 0, gp).astype(probs.dtype, copy=False)
        dprobs = np.zeros_like(probs.data)
        np.put_along_axis(dprobs, t, gp, axis=1)
        return (dprobs,)

    return record("cross_entropy", (probs,), out, backward_fn)


# ---------------------------------------------------------------- residual


def conv_bn_relu(x: Tensor, conv: ConvParams, bn: BatchNormParams, mode: str = "train") -> Tensor:
    return relu(batch_norm(conv2d(x, conv), bn, mode))


def residual_forward(x: Tensor, block_a, block_b, projection: ConvParams | None = None, mode: str = "train") -> Tensor:
    """Two conv-BN-ReLU sub-blocks plus a skip link.

    ``block_a``/``block_b`` are ``(ConvParams, BatchNormParams)`` pairs.  The skip is
    the identity, or ``projection`` when channel counts differ.
    """
    body = conv_bn_relu(conv_bn_relu(x, *block_a, mode=mode), *block_b, mode=mode)
    skip = x if projection is None else conv2d(x, projection)
    if skip.shape != body.shape:
        raise ShapeError(
            f"residual skip shape {skip.shape} does not match block output {body.shape}; a projection is required"
        )
    return add(body, skip)
