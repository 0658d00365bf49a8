"""Central finite-difference checks of every differentiable layer kind.

Each check builds a small f64 problem, reduces the layer output to a scalar
with a fixed random projection (or uses the loss directly), and compares the
tape gradients with ``(f(x+h) - f(x-h)) / 2h`` element by element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nets.builders import SegConfig, build_cov_raseg
from .nets.graph import forward
from .tensor import GradTape, Tensor, backward

TOLERANCE = 1e-4
STEP = 1e-5
# gradients smaller than this are compared in absolute terms
ERROR_FLOOR = 1e-5


@dataclass
class GradCheckResult:
    kind: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def check_gradients(kind: str, loss_fn, tensors, rng=None, per_tensor: int | None = None,
                    step: float = STEP) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``per_tensor`` limits the check to that many randomly drawn entries of each
    tensor (all entries when ``None``).
    """
    for t in tensors:
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst, count = 0.0, 0
    for t, g in zip(tensors, analytic):
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        if per_tensor is None or flat.size <= per_tensor:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, per_tensor, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn().data.item()
            flat[i] = orig - step
            f_minus = loss_fn().data.item()
            flat[i] = orig
            worst = max(worst, relative_error(float(gflat[i]), (f_plus - f_minus) / (2 * step)))
            count += 1
    return GradCheckResult(kind, worst, count)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype="f64")


def _away_from_zero(rng, *shape) -> Tensor:
    # keep every entry at least 0.05 from the ReLU kink
    v = rng.uniform(0.05, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(v, requires_grad=True, dtype="f64")


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.weighted_sum(out, proj)


def _bn(rng, c: int) -> ops.BatchNormParams:
    return ops.BatchNormParams(
        gamma=Tensor(1.0 + 0.3 * rng.standard_normal(c), requires_grad=True, dtype="f64"),
        beta=Tensor(0.3 * rng.standard_normal(c), requires_grad=True, dtype="f64"),
        running_mean=Tensor(np.zeros(c), dtype="f64"),
        running_var=Tensor(np.ones(c), dtype="f64"),
    )


def _conv(rng, out_c, in_c, k, stride=1, padding=0) -> ops.ConvParams:
    return ops.ConvParams(_t(rng, out_c, in_c, k, k, scale=0.5), _t(rng, out_c, scale=0.1), stride, padding)


def _layer_checks(rng) -> list[GradCheckResult]:
    results = []

    x = _t(rng, 2, 3, 7, 6)
    w, b = _t(rng, 4, 3, 3, 2), _t(rng, 4)
    p = ops.ConvParams(w, b, stride=(2, 1), padding=(1, 0))
    proj = rng.standard_normal((2, 4, 4, 5))
    results.append(check_gradients("conv", lambda: _projected(ops.conv2d(x, p), proj), [x, w, b]))

    x = _t(rng, 3, 2, 4, 5)
    bn = _bn(rng, 2)
    proj = rng.standard_normal(x.shape)
    results.append(check_gradients(
        "batchnorm_train", lambda: _projected(ops.batch_norm(x, bn, "train"), proj), [x, bn.gamma, bn.beta]))

    x = _away_from_zero(rng, 2, 3, 4, 4)
    proj = rng.standard_normal(x.shape)
    results.append(check_gradients("relu", lambda: _projected(ops.relu(x), proj), [x]))

    x = _t(rng, 2, 3, 6, 4)
    proj = rng.standard_normal((2, 3, 3, 2))
    results.append(check_gradients("maxpool", lambda: _projected(ops.max_pool2d(x)[0], proj), [x]))
    results.append(check_gradients("avgpool", lambda: _projected(ops.avg_pool2d(x), proj), [x]))

    _, imap = ops.max_pool2d(Tensor(rng.standard_normal((2, 3, 6, 4)), dtype="f64"))
    v = _t(rng, 2, 3, 3, 2)
    proj = rng.standard_normal((2, 3, 6, 4))
    results.append(check_gradients("maxunpool", lambda: _projected(ops.max_unpool2d(v, imap), proj), [v]))
    results.append(check_gradients("avgunpool", lambda: _projected(ops.avg_unpool2d(v), proj), [v]))

    x, w, b = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)
    proj = rng.standard_normal((3, 4))
    results.append(check_gradients("fc", lambda: _projected(ops.fully_connected(x, w, b), proj), [x, w, b]))

    x = _t(rng, 2, 2, 5, 5)
    blocks = [(_conv(rng, 3, 2, 3, padding=1), _bn(rng, 3)), (_conv(rng, 3, 3, 3, padding=1), _bn(rng, 3))]
    proj_conv = _conv(rng, 3, 2, 1)
    proj = rng.standard_normal((2, 3, 5, 5))
    leaves = [x, proj_conv.weights, proj_conv.bias]
    for conv, bnp in blocks:
        leaves += [conv.weights, conv.bias, bnp.gamma, bnp.beta]
    results.append(check_gradients(
        "residual_block", lambda: _projected(ops.residual_forward(x, *blocks, projection=proj_conv), proj), leaves))

    logits = _t(rng, 4, 3, 2, 2)
    targets = rng.integers(0, 3, (4, 2, 2))
    results.append(check_gradients(
        "softmax_cross_entropy", lambda: ops.cross_entropy_loss(ops.softmax(logits), targets), [logits]))
    weights = rng.uniform(0.2, 5.0, 3)
    results.append(check_gradients(
        "weighted_cross_entropy", lambda: ops.cross_entropy_loss(ops.softmax(logits), targets, weights), [logits]))
    return results


def check_full_segmenter(rng, input_hw=(16, 16), min_params: int = 100, step: float = 1e-6) -> GradCheckResult:
    """Check the whole dual-pooling segmenter on sampled parameters in train mode.

    At 16x16 the bottleneck batch norm sees only two values per channel, which
    makes the loss strongly curved; the smaller default step keeps the
    central-difference truncation error well below the tolerance.
    """
    model = build_cov_raseg(SegConfig(input_hw=input_hw), seed=int(rng.integers(2**31)), precision="f64")
    x = rng.standard_normal((2, 1, *input_hw))
    targets = rng.integers(0, 2, (2, *input_hw))
    params = model.parameters()
    per_tensor = max(2, -(-min_params // len(params)))
    return check_gradients(
        "cov_raseg_full",
        lambda: ops.cross_entropy_loss(forward(model, x, mode="train"), targets),
        params, rng=rng, per_tensor=per_tensor, step=step,
    )


def run_suite(seed: int = 0, full_model: bool = True) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = _layer_checks(rng)
    if full_model:
        results.append(check_full_segmenter(rng))
    return results
