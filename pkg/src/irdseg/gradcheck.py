"""Finite-difference verification of the guided-convolution backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from irdseg.conv_ops import (
    GuidedConvParams,
    da_shape_conv_backward,
    da_shape_conv_forward,
    depth_aware_conv_backward,
    depth_aware_conv_forward,
    shape_conv_backward,
    shape_conv_forward,
)
from irdseg.rng import SplitMix64
from irdseg.tensor import ConvGeometry, finite_diff_grad

OPS = ("shape", "depth-aware", "da-shape")
ARG_NAMES = ("input", "kernel", "w_base", "w_shape")


@dataclass
class GradcheckReport:
    op: str
    trials: int
    tol: float
    errors: list  # per trial, {argument: max relative error}

    @property
    def max_error(self) -> float:
        return max((max(e.values()) for e in self.errors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def lines(self) -> list[str]:
        out = []
        for i, e in enumerate(self.errors):
            parts = " ".join(f"{k}={v:.3e}" for k, v in e.items())
            out.append(f"trial {i}: {parts}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict} op={self.op} trials={self.trials} max_rel_error={self.max_error:.3e} tol={self.tol:g}")
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def random_instance(seed: int, alpha: float = 1.0):
    """Small random problem: input, params, depth, geometry, upstream gradient."""
    r = SplitMix64(seed)
    h, w = r.integer(4, 7), r.integer(4, 7)
    cin, cout = r.integer(1, 3), r.integer(1, 3)
    stride = 2 if r.scalar() < 0.3 else 1
    if stride == 2:
        # keep the output extent integral under padding 1
        h, w = h | 1, w | 1
    geom = ConvGeometry(3, 3, stride, 1)
    x = r.normal(h * w * cin).reshape(h, w, cin)
    kernel = r.normal(9 * cin * cout).reshape(3, 3, cin, cout)
    w_base = 1.0 + 0.3 * r.normal(cin * cout).reshape(cin, cout)
    w_shape = np.eye(9) + 0.2 * r.normal(81).reshape(9, 9)
    depth = r.uniform(h * w, 0.5, 4.0).reshape(h, w)
    ho, wo = geom.output_size(h, w)
    grad_out = r.normal(ho * wo * cout).reshape(ho, wo, cout)
    return x, GuidedConvParams(kernel, w_base, w_shape, alpha), depth, geom, grad_out


def _forward(op, x, p, depth, geom):
    if op == "shape":
        return shape_conv_forward(x, p, geom)
    if op == "depth-aware":
        return depth_aware_conv_forward(x, p.kernel, depth, p.alpha, geom)
    return da_shape_conv_forward(x, p, depth, geom)


def _backward(op, x, p, depth, geom, g):
    if op == "shape":
        return shape_conv_backward(x, p, geom, g)
    if op == "depth-aware":
        return depth_aware_conv_backward(x, p.kernel, depth, p.alpha, geom, g)
    return da_shape_conv_backward(x, p, depth, geom, g)


def check_instance(op: str, seed: int, alpha: float = 1.0, h: float = 1e-5) -> dict:
    """Max relative error of each analytic gradient of ``sum(g * op(...))``."""
    if op not in OPS:
        raise ValueError(f"op must be one of {OPS}, got {op!r}")
    x, p, depth, geom, g = random_instance(seed, alpha)
    analytic = _backward(op, x, p, depth, geom, g)
    args = [x, p.kernel, p.w_base, p.w_shape]
    errors = {}
    for i, grad in enumerate(analytic):

        def f(v, i=i):
            a = list(args)
            a[i] = v
            q = GuidedConvParams(a[1], a[2], a[3], alpha)
            return float(np.sum(g * _forward(op, a[0], q, depth, geom)))

        errors[ARG_NAMES[i]] = rel_error(grad, finite_diff_grad(f, args[i], h))
    return errors


def run_gradcheck(op: str, trials: int = 20, tol: float = 1e-4, seed: int = 0, alpha: float = 1.0) -> GradcheckReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    errors = [check_instance(op, seed * 1_000_003 + t, alpha) for t in range(trials)]
    return GradcheckReport(op, trials, tol, errors)
