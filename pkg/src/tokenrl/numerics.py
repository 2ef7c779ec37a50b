"""Core tensor ops and a finite-difference gradient checker.

All ops are thin, pure functions over torch tensors. Training runs in
float32; verification (gradient checks, oracle comparisons) runs in
float64. Non-finite values are treated as hard errors, never propagated.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class NonFiniteError(RuntimeError):
    """Raised when a NaN/Inf shows up where only finite values are allowed."""


def assert_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b with an explicit inner-dimension check."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax: axis {axis} invalid for ndim {x.ndim}")
    shifted = x - x.max(dim=axis, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF.

    We use the exact formula (not the tanh approximation):
        gelu(x) = x * 0.5 * (1 + erf(x / sqrt(2)))
    """
    return x * 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def grad_check(
    f: Callable[..., Tensor],
    xs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    `f` must be pure and take float64 tensors; the returned value is
    max over all coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if isinstance(xs, torch.Tensor):
        xs = [xs]
    xs = [x.detach().to(torch.float64).requires_grad_(True) for x in xs]
    out = f(*xs)
    assert_finite(out, "grad_check forward output")
    loss = out.sum()
    grads = torch.autograd.grad(loss, xs, allow_unused=False)

    worst = 0.0
    for x, g in zip(xs, grads):
        assert_finite(g, "grad_check analytic gradient")
        flat = x.detach().reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = f(*[t.detach() for t in xs]).sum()
            flat[i] = orig - eps
            lo = f(*[t.detach() for t in xs]).sum()
            flat[i] = orig
            assert_finite(hi, "grad_check perturbed output")
            assert_finite(lo, "grad_check perturbed output")
            numeric = (hi - lo).item() / (2.0 * eps)
            analytic = g_flat[i].item()
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            worst = max(worst, err)
    return worst
