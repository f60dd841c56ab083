"""Specific-ratio (SRDA) and agnostic-ratio (ARDA) rate-distortion attacks.

Both attacks optimize an additive perturbation with Adam under an RMS bound.
The bound is enforced by radial projection before each loss evaluation, the
learning rate drops once halfway through the steps taken after first contact
with the bound, and the output is clamped to [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from . import diffcore as dc
from .models import CompressionModel, decode, encode
from .optim import AdamState, adam_step

DIRECTIONS: Tuple[Tuple[float, float], ...] = (
    (1.0, 0.0),
    (1.0, 0.0002),
    (1.0, 0.002),
    (1.0, 0.02),
    (1.0, 0.2),
    (0.0, 1.0),
)


@dataclass(frozen=True)
class AttackConfig:
    gamma_r: float
    gamma_d: float
    eps: float = 1e-3
    steps: int = 64
    lr: float = 1e-2
    lr_final: float = 1e-3
    tau: float = 1.0
    max_iter_factor: int = 16

    def __post_init__(self):
        if self.gamma_r < 0 or self.gamma_d < 0:
            raise ValueError("attack coefficients must be nonnegative")
        if self.gamma_r == 0 and self.gamma_d == 0:
            raise ValueError("gamma_r and gamma_d cannot both be zero")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 1:
            raise ValueError("need at least one surface step")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def lr_at(self, surface_step: int) -> float:
        return self.lr if surface_step < self.steps // 2 else self.lr_final


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    loss_trace: List[float]
    lr_trace: List[float]
    surface_trace: List[int]  # surface-step index per iteration (-1 before contact)
    surface_steps: int
    iterations: int
    unstable: bool = False
    aborted: bool = False
    weights_trace: List[List[List[float]]] = field(default_factory=list)  # iteration x sample x submodel
    init_losses: Optional[List[List[float]]] = None  # sample x submodel


def project_to_ball(delta: torch.Tensor, eps: float):
    """Radially shrink each sample of ``delta`` to RMS <= eps.

    Returns ``(delta', on_surface)`` where ``on_surface`` is a bool tensor,
    one flag per batch element, set where the projection was active.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    r = dc.rms(delta)
    over = r > eps
    scale = torch.where(over, eps / torch.where(over, r, torch.ones_like(r)), torch.ones_like(r))
    shape = (-1,) + (1,) * (delta.dim() - 1)
    return delta * scale.to(delta.dtype).view(shape), over


def feasible_output(x: torch.Tensor, delta: torch.Tensor, eps: float) -> torch.Tensor:
    """clamp(x + delta) with the realized RMS(x_a - x) <= eps.

    Adding in the image dtype rounds each pixel by up to half an ulp, which
    can push an on-surface delta just past the bound; such samples are
    shrunk until the measured perturbation fits.
    """
    shape = (-1,) + (1,) * (x.dim() - 1)
    x_a = torch.clamp(x + delta, 0.0, 1.0)
    for _ in range(20):
        r = dc.rms(x_a - x)
        over = r > eps
        if not bool(over.any()):
            return x_a
        shrink = torch.where(over, eps / r * (1 - 1e-6), torch.ones_like(r)).to(delta.dtype)
        delta = delta * shrink.view(shape)
        x_a = torch.clamp(x + delta, 0.0, 1.0)
    raise FloatingPointError("cannot represent a perturbation within the budget")


def sample_losses(model, x_adv, gamma_r, gamma_d):
    """L_s = -gamma_r * R(x_a) - gamma_d * D(x_a), one value per batch element."""
    b = encode(model, x_adv, "round_ste")
    x_hat = decode(model, b.y_hat)
    n, c, h, w = x_adv.shape
    bits = -dc.sum64(b.loglik_y, dim=(1, 2, 3))
    if b.loglik_z is not None:
        bits = bits - dc.sum64(b.loglik_z, dim=(1, 2, 3))
    rate = bits / math.log(2.0) / (h * w)
    err = (x_hat - x_adv) * 255.0
    dist = dc.sum64(err * err, dim=(1, 2, 3)) / (c * h * w)
    return -gamma_r * rate - gamma_d * dist


def attack_loss(model, x_adv, gamma_r, gamma_d):
    """Batch-mean L_s (equals the loss of the single image for N = 1)."""
    return sample_losses(model, x_adv, gamma_r, gamma_d).mean()


def _frozen(models):
    flags = []
    for m in models:
        flags.append([p.requires_grad for p in m.parameters()])
        for p in m.parameters():
            p.requires_grad_(False)
    return flags


def _restore(models, flags):
    for m, fl in zip(models, flags):
        for p, f in zip(m.parameters(), fl):
            p.requires_grad_(f)


def _run(models: Sequence[CompressionModel], x: torch.Tensor, config: AttackConfig, weighted: bool) -> AttackResult:
    x = x.detach()
    delta = torch.zeros_like(x)
    state = AdamState([delta])
    contacted = False
    surface = 0
    it = 0
    cap = config.max_iter_factor * config.steps
    res = AttackResult(x, [], [], [], 0, 0)
    last_good = delta.clone()
    init = None
    if config.eps == 0:
        # empty feasible set: nothing to optimize
        res.x_adv = x.clamp(0.0, 1.0)
        return res
    flags = _frozen(models)
    try:
        while surface < config.steps:
            delta, on = project_to_ball(delta, config.eps)
            if bool(on.any()):
                contacted = True
            last_good = delta.detach().clone()
            lr = config.lr_at(surface)
            delta.requires_grad_(True)
            try:
                losses = [sample_losses(m, x + delta, config.gamma_r, config.gamma_d) for m in models]
            except dc.NonFiniteError:
                losses = None
            if losses is None or not all(bool(torch.isfinite(l).all()) for l in losses):
                res.unstable = True
                delta = last_good
                break
            # batch elements are independent attacks: each has its own weights
            values = torch.stack([l.detach() for l in losses], 1).tolist()  # N x K
            if weighted:
                if init is None:
                    init = values
                    res.init_losses = [list(v) for v in init]
                w = [arda_weights(i0, cur, config.tau)[0] for i0, cur in zip(init, values)]
                res.weights_trace.append(w)
                wt = torch.tensor(w, dtype=losses[0].dtype)
                total = (torch.stack(losses, 1) * wt).sum()
            else:
                total = losses[0].sum()
            (g,) = torch.autograd.grad(total, [delta])
            delta = delta.detach()
            state.params = [delta]
            adam_step(state, [g], lr)
            res.loss_trace.append(float(total.detach()) / x.shape[0])
            res.lr_trace.append(lr)
            res.surface_trace.append(surface if contacted else -1)
            if contacted:
                surface += 1
            it += 1
            if not contacted and it >= cap:
                res.aborted = True
                break
    finally:
        _restore(models, flags)
    delta, _ = project_to_ball(delta.detach(), config.eps)
    res.x_adv = feasible_output(x, delta, config.eps)
    res.surface_steps = surface
    res.iterations = it
    return res


def srda(model: CompressionModel, x: torch.Tensor, config: AttackConfig) -> AttackResult:
    """Adversarial example for one submodel (batched inputs attack per sample)."""
    return _run([model], x, config, weighted=False)


def arda_weights(init_losses: Sequence[float], cur_losses: Sequence[float], tau: float):
    """softmax(w'/tau) with w' = L_init / L_cur.

    Ratios that are non-finite or non-positive (zero or sign-flipped current
    loss) are clamped to [1e-3, 1e3] and flagged.  Returns ``(weights, flagged)``.
    """
    if len(init_losses) != len(cur_losses) or not init_losses:
        raise ValueError("loss lists must be non-empty and equally long")
    ratios, flagged = [], False
    for a, b in zip(init_losses, cur_losses):
        r = a / b if b != 0 else math.copysign(math.inf, a if a != 0 else 1.0)
        if not math.isfinite(r) or r <= 0:
            flagged = True
            r = 1e3 if (math.isinf(r) and r > 0) else 1e-3
        elif r < 1e-3 or r > 1e3:
            r = min(max(r, 1e-3), 1e3)
            flagged = True
        ratios.append(r)
    if math.isinf(tau):
        n = len(ratios)
        return [1.0 / n] * n, flagged
    z = [r / tau for r in ratios]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e], flagged


def arda(models: Sequence[CompressionModel], x: torch.Tensor, config: AttackConfig) -> AttackResult:
    """One adversarial example against every submodel, dynamically weighted."""
    if not models:
        raise ValueError("need at least one submodel")
    return _run(list(models), x, config, weighted=True)


def gaussian_control(x: torch.Tensor, eps: float, seed: int = 0) -> torch.Tensor:
    """Gaussian noise scaled to the same RMS as the attack budget, clamped."""
    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
    r = dc.rms(noise).to(x.dtype).view((-1,) + (1,) * (x.dim() - 1))
    return torch.clamp(x + noise * (eps / r), 0.0, 1.0)
