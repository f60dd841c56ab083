"""Differentiable primitives for the compression graph.

Tensors, the tape and reverse-mode accumulation come from torch autograd; this
module adds the operations the codec and the attacks need, with the shape and
finiteness checks they rely on, plus a float64 finite-difference checker.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


class GraphReusedError(RuntimeError):
    pass


_check_enabled = contextvars.ContextVar("licr_check_finite", default=True)


@contextlib.contextmanager
def allow_nonfinite():
    """Let forward ops emit inf/nan (measurement code handles them itself)."""
    token = _check_enabled.set(False)
    try:
        yield
    finally:
        _check_enabled.reset(token)


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if _check_enabled.get() and not torch.isfinite(t).all():
        raise NonFiniteError(where)
    return t


def conv2d(input, kernel, stride=1, padding=0, bias=None):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[1]} input channels, got {input.shape[1]}"
        )
    out = F.conv2d(input, kernel, bias, stride=stride, padding=padding)
    return check_finite(out, "conv2d")


def conv2d_transpose(input, kernel, stride=1, padding=0, bias=None, output_padding=None):
    """Adjoint of :func:`conv2d` for the same ``kernel``, stride and padding.

    ``kernel`` keeps the conv2d layout (out, in, kh, kw), so the result has
    ``kernel.shape[1]`` channels.  ``output_padding`` defaults to ``stride - 1``,
    which maps an ``H`` input to ``stride * H`` for odd kernels padded by k // 2.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError("conv2d_transpose expects NCHW input and OIHW kernel")
    if input.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"kernel expects {kernel.shape[0]} input channels, got {input.shape[1]}"
        )
    if output_padding is None:
        output_padding = stride - 1
    out = F.conv_transpose2d(
        input, kernel, bias, stride=stride, padding=padding, output_padding=output_padding
    )
    return check_finite(out, "conv2d_transpose")


def gdn(input, beta, gamma, inverse=False):
    """(Inverse) generalized divisive normalization.

    ``beta`` (C,) and ``gamma`` (C, C) are the effective, already
    reparameterized values: y_i = x_i * (beta_i + sum_j gamma_ij x_j^2)^(-1/2),
    or ^(+1/2) when ``inverse``.
    """
    if (beta <= 0).any():
        raise ValueError("gdn requires strictly positive beta")
    c = input.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ShapeError(f"gdn parameters do not match {c} channels")
    norm = F.conv2d(input * input, gamma.reshape(c, c, 1, 1), beta)
    out = input * torch.sqrt(norm) if inverse else input * torch.rsqrt(norm)
    return check_finite(out, "igdn" if inverse else "gdn")


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


QuantMode = Union[str, Callable[[torch.Tensor], torch.Tensor]]


def quantize(input, mode: QuantMode = "round_ste", generator: Optional[torch.Generator] = None):
    """Quantize latents.

    ``noise`` adds U(-0.5, 0.5) drawn from ``generator`` (training proxy);
    ``round_ste`` rounds and passes the gradient through unchanged.  A callable
    mode is applied as-is, which lets tests swap in a smooth surrogate.
    """
    if callable(mode):
        return mode(input)
    if mode == "noise":
        if generator is None:
            raise ValueError("noise quantization needs a seeded generator")
        u = torch.rand(input.shape, generator=generator, dtype=input.dtype) - 0.5
        return input + u
    if mode == "round_ste":
        return _RoundSTE.apply(input)
    if mode == "round":
        return torch.round(input)
    raise ValueError(f"unknown quantization mode {mode!r}")


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    """max(x, bound) whose gradient still flows when it pushes x upward."""
    return _LowerBound.apply(x, bound)


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def backward(root: torch.Tensor, leaves: Optional[Sequence[torch.Tensor]] = None):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf.

    Returns the gradients of ``leaves`` (zeros for leaves the root does not
    depend on).  A graph may be differentiated once; a second call raises
    :class:`GraphReusedError` instead of silently doubling gradients.
    """
    if root.numel() != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if getattr(root, "_licr_backward_done", False):
        raise GraphReusedError("backward already ran on this graph")
    check_finite(root, "backward root")
    root._licr_backward_done = True
    if root.requires_grad:
        root.backward()
    if leaves is None:
        return None
    return [
        leaf.grad.clone() if leaf.grad is not None else torch.zeros_like(leaf)
        for leaf in leaves
    ]


def sum64(t: torch.Tensor, dim=None) -> torch.Tensor:
    """Sum with float64 accumulation."""
    if dim is None:
        return torch.sum(t, dtype=torch.float64)
    return torch.sum(t, dim=dim, dtype=torch.float64)


def rms(t: torch.Tensor, per_sample: bool = True) -> torch.Tensor:
    """Root-mean-square; per batch element when ``per_sample``."""
    if per_sample and t.dim() > 1:
        flat = t.reshape(t.shape[0], -1).to(torch.float64)
        return torch.sqrt(torch.mean(flat * flat, dim=1))
    flat = t.reshape(-1).to(torch.float64)
    return torch.sqrt(torch.mean(flat * flat))


def finite_difference_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-3,
    coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps the inputs to a scalar.  The analytic gradient is taken at the
    inputs' own dtype; the finite differences re-evaluate ``fn`` on float64
    copies.  ``coords`` limits the check to that many random coordinates per
    input.  The per-coordinate error is |a - n| / max(|n|, 1e-3 * max|n|).
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(l) for g, l in zip(grads, leaves)]

    wide = [t.detach().to(torch.float64).clone() for t in inputs]
    rng = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    for k, (w, g) in enumerate(zip(wide, grads)):
        n = w.numel()
        idx = (
            torch.arange(n)
            if coords is None or coords >= n
            else torch.randperm(n, generator=rng)[:coords]
        )
        flat = w.view(-1)
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(*wide))
            flat[i] = orig - step
            lo = float(fn(*wide))
            flat[i] = orig
            numeric.append((hi - lo) / (2 * step))
            analytic.append(float(g.reshape(-1)[i]))
    a = torch.tensor(analytic, dtype=torch.float64)
    nm = torch.tensor(numeric, dtype=torch.float64)
    scale = max(float(nm.abs().max()) if nm.numel() else 0.0, 1e-12)
    denom = torch.maximum(nm.abs(), torch.full_like(nm, 1e-3 * scale))
    return float(((a - nm).abs() / denom).max()) if nm.numel() else 0.0
