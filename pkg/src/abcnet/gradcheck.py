"""Central finite-difference gradient checks and the per-op battery."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, concat, mul, no_grad, precision, relu, sigmoid, tsum

TOLERANCE = 1e-3


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-3,
               coords: Optional[Sequence[int]] = None, reference_dtype=np.float64,
               kink_retries: int = 3) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).

    The analytic gradient comes from ``backward`` in the working precision.
    The central differences are evaluated in ``reference_dtype`` (float64 by
    default) so float32 rounding in ``f`` does not masquerade as a wrong rule.

    A ReLU or max-pool switch inside [x - eps, x + eps] makes the secant
    meaningless. That shows up as disagreeing one-sided slopes; the step is
    then cut tenfold, up to ``kink_retries`` times.

    ``f`` is evaluated at ``point`` itself; coordinates are perturbed in place
    and restored, so ``point`` may be a parameter that ``f`` closes over.
    ``coords`` restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was_tracked = point.requires_grad
    point.requires_grad = True
    point.grad = None
    f(point).backward()
    analytic = np.zeros(point.size) if point.grad is None else point.grad.reshape(-1).astype(np.float64)
    point.grad = None

    working = point.data
    point.data = working.astype(reference_dtype)
    flat = point.data.reshape(-1)  # view: writes land in point.data
    idx = range(point.size) if coords is None else coords
    worst = 0.0
    try:
        with precision(reference_dtype), no_grad():
            f0 = f(point).item()
            for i in idx:
                orig = flat[i]
                h = eps
                for attempt in range(kink_retries + 1):
                    if attempt:
                        h /= 10
                    flat[i] = orig + h
                    f_hi = f(point).item()
                    flat[i] = orig - h
                    f_lo = f(point).item()
                    flat[i] = orig
                    fwd, bwd = (f_hi - f0) / h, (f0 - f_lo) / h
                    if abs(fwd - bwd) <= TOLERANCE * max(1.0, abs(fwd), abs(bwd)):
                        break
                numeric = (f_hi - f_lo) / (2 * h)
                a = analytic[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    finally:
        point.data = working
        point.requires_grad = was_tracked
    return worst


@dataclass
class CheckResult:
    name: str
    max_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return x.astype(DTYPE)


def _distinct(rng, shape, spacing=0.05):
    # values pairwise separated so max-pool argmaxes cannot flip under perturbation
    vals = rng.permutation(int(np.prod(shape))) * spacing
    return (vals - vals.mean()).reshape(shape).astype(DTYPE)


def _check_all(fn, leaves: Sequence[Tensor], rng) -> float:
    """Gradient-check ``fn(*leaves)`` projected to a scalar, w.r.t. every leaf."""
    for t in leaves:
        t.requires_grad = True
    proj_rng = np.random.default_rng(rng.integers(1 << 31))
    out_shape = fn(*leaves).shape
    proj = Tensor(proj_rng.uniform(-1.0, 1.0, out_shape))
    worst = 0.0
    for leaf in leaves:
        worst = max(worst, grad_check(lambda _p: tsum(mul(fn(*leaves), proj)), leaf))
    return worst


def _case_conv2d(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    h, w = rng.integers(4, 7), rng.integers(4, 7)
    dilation = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(n, cin, h, w)))
    wt = Tensor(rng.normal(size=(cout, cin, 3, 3)) * 0.5)
    b = Tensor(rng.normal(size=(cout,)))
    return _check_all(lambda x, wt, b: ops.conv2d(x, wt, b, stride=stride, padding=dilation,
                                                  dilation=dilation), [x, wt, b], rng)


def _case_dilated_conv2d(rng):
    dilation = int(rng.integers(2, 5))
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    wt = Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5)
    b = Tensor(rng.normal(size=(2,)))
    return _check_all(lambda x, wt, b: ops.conv2d(x, wt, b, padding=dilation, dilation=dilation),
                      [x, wt, b], rng)


def _case_pointwise(rng):
    cin, cout = rng.integers(1, 5), rng.integers(1, 5)
    x = Tensor(rng.normal(size=(2, cin, 3, 4)))
    wt = Tensor(rng.normal(size=(cout, cin, 1, 1)))
    b = Tensor(rng.normal(size=(cout,)))
    return _check_all(ops.pointwise_conv, [x, wt, b], rng)


def _case_fc(rng):
    m, k = rng.integers(2, 13), rng.integers(1, 6)
    x = Tensor(rng.normal(size=(2, m)))
    wt = Tensor(rng.normal(size=(k, m)) * 0.5)
    b = Tensor(rng.normal(size=(k,)))
    return _check_all(ops.fully_connected, [x, wt, b], rng)


def _case_softmax(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)) * 2.0)
    axis = int(rng.integers(0, 3))
    return _check_all(lambda x: ops.softmax(x, axis=axis), [x], rng)


def _case_bmm(rng):
    c, h, w = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    a = Tensor(rng.normal(size=(c, h, h)))
    b = Tensor(rng.normal(size=(c, h, w)))
    return _check_all(ops.batched_matmul, [a, b], rng)


def _case_maxpool(rng):
    x = Tensor(_distinct(rng, (1, 2, 4, 6)))
    return _check_all(ops.maxpool2x2, [x], rng)


def _case_upsample(rng):
    x = Tensor(rng.normal(size=(1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
    return _check_all(ops.upsample_bilinear2x, [x], rng)


def _case_relu(rng):
    x = Tensor(_away_from_zero(rng, (3, 7)))
    return _check_all(relu, [x], rng)


def _case_sigmoid(rng):
    x = Tensor(rng.normal(size=(3, 5)) * 2.0)
    return _check_all(sigmoid, [x], rng)


def _case_scale(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    alpha = Tensor(rng.normal(size=(1,)))
    return _check_all(ops.scale, [x, alpha], rng)


def _case_concat(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 3, 3, 3)))
    return _check_all(lambda a, b: concat([a, b], axis=1), [a, b], rng)


def _case_group_norm(rng):
    groups = int(rng.choice([1, 2]))
    x = Tensor(rng.normal(size=(2, 4, 3, 3)) * 2.0 + 0.5)
    return _check_all(lambda x: ops.group_norm(x, groups=groups), [x], rng)


def _case_soft_iou(rng):
    from .train import soft_iou_loss

    logits = Tensor(rng.normal(size=(2, 1, 4, 4)) * 2.0)
    target = (rng.random((2, 1, 4, 4)) < 0.3).astype(DTYPE)
    return grad_check(lambda p: soft_iou_loss(p, target), logits)


OP_CASES: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": _case_conv2d,
    "conv2d_dilated": _case_dilated_conv2d,
    "pointwise_conv": _case_pointwise,
    "fully_connected": _case_fc,
    "softmax": _case_softmax,
    "batched_matmul": _case_bmm,
    "maxpool2x2": _case_maxpool,
    "upsample_bilinear2x": _case_upsample,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "scale": _case_scale,
    "concat": _case_concat,
    "group_norm": _case_group_norm,
    "soft_iou_loss": _case_soft_iou,
}


def network_check(seed: int = 0, input_dim: int = 4, size: int = 16,
                  coords_per_param: int = 3, eps: float = 1e-5) -> float:
    """End-to-end check of a small ABC network with loss = sum of main logits.

    Checks every input pixel plus ``coords_per_param`` random coordinates of
    each parameter tensor. Attention gates are set non-zero so the attention
    path carries gradient, and biases are randomised so the point is generic.
    The step is smaller than the per-op default: the deep stack of ReLUs and
    pooling switches puts a corner within 1e-3 of most coordinates, while the
    float64 reference keeps a 1e-5 secant free of rounding noise.

    """
    from .model import ABC, ABCConfig

    rng = np.random.default_rng(seed)
    model = ABC(ABCConfig(input_dim=input_dim, input_resolution=(size, size)), seed=seed)
    for name, p in model.named_parameters():
        if name.endswith("alpha"):
            p.data[...] = rng.uniform(0.5, 1.0)
        elif name.endswith("bias"):
            # zero biases put dead pixels exactly on a ReLU corner
            p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
    image = Tensor(rng.uniform(0.0, 1.0, (1, 1, size, size)))

    worst = grad_check(lambda x: tsum(model(x)[0]), image, eps=eps)
    for _, p in model.named_parameters():
        coords = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        worst = max(worst, grad_check(lambda _p: tsum(model(image)[0]), p, coords=coords, eps=eps))
    model.zero_grad()
    return worst


def run_battery(seed: int = 0, instances: int = 5, include_network: bool = True) -> list[CheckResult]:
    """Run every op case ``instances`` times (plus the network check); deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    results = []
    for name, case in OP_CASES.items():
        errs = [case(rng) for _ in range(instances)]
        results.append(CheckResult(name, max(errs), instances))
    if include_network:
        results.append(CheckResult("abc_network", network_check(seed=seed), 1))
    return results
