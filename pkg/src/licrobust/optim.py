"""Adam, learning-rate schedules, RD training and the two defenses."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import diffcore as dc
from .models import CompressionModel, forward_rd

log = logging.getLogger(__name__)


class AdamState:
    """Bias-corrected Adam over a fixed list of tensors."""

    def __init__(self, params: Sequence[torch.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step = 0


def adam_step(state: AdamState, grads: Sequence[Optional[torch.Tensor]], lr: float):
    if len(grads) != len(state.params):
        raise ValueError("one gradient per parameter expected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(state.params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise dc.ShapeError(f"gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state.params


def step_schedule(base: float, low: float, total: int, drop_at: int, warmup: int = 0) -> Callable[[int], float]:
    """``base`` for steps < ``drop_at``, ``low`` afterwards; the first
    ``warmup`` steps ramp linearly up to ``base``."""

    def lr(step: int) -> float:
        v = base if step < drop_at else low
        return v * (step + 1) / warmup if step < warmup else v

    return lr


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lmbda: float
    steps: int = 2000
    crop: int = 64
    batch: int = 8
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_frac: float = 0.8
    warmup: int = 100  # linear ramp; a cold IGDN decoder can blow up at full lr
    seed: int = 0

    def __post_init__(self):
        if self.crop % 8:
            raise ValueError("crop must be divisible by 8")
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")


@dataclass
class TraceRow:
    step: int
    rate: float
    distortion: float
    total: float


class TrainingDiverged(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def random_crops(data: torch.Tensor, batch: int, crop: int, gen: torch.Generator):
    n, _, h, w = data.shape
    idx = torch.randint(0, n, (batch,), generator=gen)
    ys = torch.randint(0, h - crop + 1, (batch,), generator=gen)
    xs = torch.randint(0, w - crop + 1, (batch,), generator=gen)
    out = [data[i, :, y : y + crop, x : x + crop] for i, y, x in zip(idx.tolist(), ys.tolist(), xs.tolist())]
    flips = torch.rand(batch, generator=gen) < 0.5
    out = [t.flip(-1) if f else t for t, f in zip(out, flips.tolist())]
    return torch.stack(out)


def rd_loss(model, x, quant_mode, gen):
    rd = forward_rd(model, x, quant_mode, gen)
    return rd.rate + model.lmbda * rd.distortion, rd


def train_rd(model: CompressionModel, dataset: torch.Tensor, config: TrainConfig):
    """Minimize R + lambda * D with noise quantization.

    Returns ``(model, trace)``; the model is trained in place.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    model.lmbda = config.lmbda
    gen = torch.Generator().manual_seed(config.seed)
    params = [p for p in model.parameters()]
    state = AdamState(params)
    lr_at = step_schedule(config.lr, config.lr_final, config.steps, int(config.steps * config.lr_drop_frac), config.warmup)
    trace: List[TraceRow] = []
    for step in range(config.steps):
        x = random_crops(dataset, config.batch, config.crop, gen)
        for p in params:
            p.grad = None
        try:
            loss, rd = rd_loss(model, x, "noise", gen)
        except dc.NonFiniteError as e:
            raise TrainingDiverged(step) from e
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        dc.backward(loss)
        torch.nn.utils.clip_grad_norm_(params, 5.0)
        adam_step(state, [p.grad for p in params], lr_at(step))
        trace.append(TraceRow(step, float(rd.rate.detach()), float(rd.distortion.detach()), float(loss.detach())))
    model.eval()
    return model, trace


def write_trace_csv(trace: Iterable[TraceRow], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "rate", "distortion", "total"])
        for r in trace:
            w.writerow([r.step, repr(r.rate), repr(r.distortion), repr(r.total)])


# ---------------------------------------------------------------------------
# defense 1: adversarial finetuning


def joint_direction_sampler(rng: np.random.Generator) -> Tuple[float, float]:
    """Pure rate 20%, pure distortion 20%, else (1, log-uniform[2e-4, 0.2])."""
    u = rng.random()
    if u < 0.2:
        return 1.0, 0.0
    if u < 0.4:
        return 0.0, 1.0
    return 1.0, float(math.exp(rng.uniform(math.log(2e-4), math.log(0.2))))


def rate_only_sampler(rng: np.random.Generator) -> Tuple[float, float]:
    return 1.0, 0.0


def distortion_only_sampler(rng: np.random.Generator) -> Tuple[float, float]:
    return 0.0, 1.0


@dataclass
class ATConfig:
    iters: int = 1000
    lr: float = 1e-4
    lr_final: float = 1e-5
    final_frac: float = 0.1
    crop: int = 64
    batch: int = 8
    attack_steps: int = 16
    eps: float = 1e-3
    seed: int = 0


def adversarial_finetune(
    model: CompressionModel,
    dataset: torch.Tensor,
    sampler: Callable[[np.random.Generator], Tuple[float, float]] = joint_direction_sampler,
    config: Optional[ATConfig] = None,
):
    """Finetune a copy of ``model`` on benign + freshly crafted SRDA samples.

    Returns ``(finetuned_model, trace)``; ``model`` itself is left untouched.
    """
    from .attacks import AttackConfig, srda

    config = config or ATConfig()
    model = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = list(model.parameters())
    state = AdamState(params)
    drop_at = config.iters - int(round(config.iters * config.final_frac))
    lr_at = step_schedule(config.lr, config.lr_final, config.iters, drop_at)
    trace = []
    for it in range(config.iters):
        x = random_crops(dataset, config.batch, config.crop, gen)
        gr, gd = sampler(rng)
        for p in params:
            p.requires_grad_(False)
        adv = srda(model, x, AttackConfig(gr, gd, eps=config.eps, steps=config.attack_steps))
        for p in params:
            p.requires_grad_(True)
            p.grad = None
        both = torch.cat([x, adv.x_adv.detach()])
        loss, rd = rd_loss(model, both, "noise", gen)
        if not torch.isfinite(loss):
            raise TrainingDiverged(it)
        dc.backward(loss)
        torch.nn.utils.clip_grad_norm_(params, 5.0)
        adam_step(state, [p.grad for p in params], lr_at(it))
        trace.append(
            {"iter": it, "gamma_r": gr, "gamma_d": gd, "rate": float(rd.rate.detach()), "distortion": float(rd.distortion.detach()), "total": float(loss.detach())}
        )
    model.eval()
    return model, trace


# ---------------------------------------------------------------------------
# defense 2: online updating of the input


@dataclass
class OnlineResult:
    x_u: torch.Tensor
    best_loss: float
    initial_loss: float
    trace: List[dict] = field(default_factory=list)


def online_loss(model, x, lmbda):
    rd = forward_rd(model, x, "round_ste")
    return rd.rate + lmbda * rd.distortion


def online_update(model: CompressionModel, x_a: torch.Tensor, lmbda: float, iters: int, lr: float = 1e-2) -> OnlineResult:
    """Adam on the pixels of ``x_a`` for R(x) + lambda * D(x), D against x itself.

    Each iterate is clamped to [0, 1]; the best iterate seen is returned, so
    the reported loss never increases with ``iters``.  Model parameters are
    only read.
    """
    req = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        x = x_a.detach().clone()
        state = AdamState([x])
        best, best_x, initial = math.inf, x.clone(), None
        trace = []
        for it in range(iters + 1):
            x.requires_grad_(it < iters)
            try:
                loss = online_loss(model, x, lmbda)
            except dc.NonFiniteError:
                loss = torch.tensor(math.inf)
            cur = float(loss.detach())
            if initial is None:
                initial = cur
            if cur < best:
                best, best_x = cur, x.detach().clone()
            trace.append({"iter": it, "loss": cur, "best": best})
            if it == iters or not math.isfinite(cur):
                break
            (g,) = torch.autograd.grad(loss, [x])
            x = x.detach()
            state.params = [x]
            adam_step(state, [g], lr)
            x.clamp_(0.0, 1.0)
        return OnlineResult(best_x, best, initial, trace)
    finally:
        for p, r in zip(model.parameters(), req):
            p.requires_grad_(r)
