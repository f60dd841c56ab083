"""Likelihood models and integer CDF tables.

Two parametric families cover every stream the codec emits: a per-channel
logistic (factorized prior, also used for the hyper-latent) and a per-element
Gaussian conditioned on predicted mean/scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffcore import lower_bound, sum64

SCALE_MIN = 0.04
LIKELIHOOD_FLOOR = 1e-9
PRECISION = 16
TOTAL = 1 << PRECISION
SYMBOL_MIN, SYMBOL_MAX = -128, 127
TAIL_SIGMAS = 8.0


def gaussian_likelihood(y_hat, mu, sigma):
    """P(y_hat) for integer bins under N(mu, sigma), floored at 1e-9."""
    sigma = lower_bound(sigma, SCALE_MIN)
    v = torch.abs(y_hat - mu)
    upper = _std_normal_cdf((0.5 - v) / sigma)
    lower = _std_normal_cdf((-0.5 - v) / sigma)
    return lower_bound(upper - lower, LIKELIHOOD_FLOOR)


def logistic_likelihood(y_hat, loc, scale):
    """P(y_hat) for integer bins under a logistic(loc, scale) density."""
    # evaluate on the left tail to avoid cancellation in 1 - sigmoid
    sign = -torch.sign(y_hat - loc).detach()
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    upper = torch.sigmoid(sign * (y_hat + 0.5 - loc) / scale)
    lower = torch.sigmoid(sign * (y_hat - 0.5 - loc) / scale)
    return lower_bound(torch.abs(upper - lower), LIKELIHOOD_FLOOR)


def _std_normal_cdf(t):
    return 0.5 * torch.erfc(-t / math.sqrt(2.0))


class FactorizedPrior(nn.Module):
    """Per-channel logistic prior with learnable location and scale."""

    def __init__(self, channels: int, init_scale: float = 1.0):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        # scale = softplus(raw) keeps s_c > 0
        raw = math.log(math.expm1(init_scale))
        self.raw_scale = nn.Parameter(torch.full((channels,), raw))

    def scale(self):
        return F.softplus(self.raw_scale) + 1e-3

    def params(self, like: torch.Tensor):
        loc = self.loc.view(1, -1, 1, 1).expand_as(like)
        scale = self.scale().view(1, -1, 1, 1).expand_as(like)
        return loc, scale

    def likelihood(self, y_hat):
        loc, scale = self.params(y_hat)
        return logistic_likelihood(y_hat, loc, scale)


class GaussianConditional:
    """Gaussian bins conditioned on externally predicted mean and scale."""

    scale_min = SCALE_MIN

    @staticmethod
    def likelihood(y_hat, mu, sigma):
        return gaussian_likelihood(y_hat, mu, sigma)


def likelihood(kind: str, y_hat, params):
    """Dispatch by family: ``kind`` is ``"gaussian"`` or ``"logistic"``."""
    if kind == "gaussian":
        return gaussian_likelihood(y_hat, *params)
    if kind == "logistic":
        return logistic_likelihood(y_hat, *params)
    raise ValueError(f"unknown likelihood kind {kind!r}")


def bits(bundle):
    """(bits_y, bits_z) as float64 scalars; bits_z is zero without a hyper-latent."""
    bits_y = -sum64(bundle.loglik_y) / math.log(2.0)
    if bundle.loglik_z is None:
        bits_z = torch.zeros((), dtype=torch.float64)
    else:
        bits_z = -sum64(bundle.loglik_z) / math.log(2.0)
    return bits_y, bits_z


# ---------------------------------------------------------------------------
# integer tables for the range coder


@dataclass(frozen=True)
class CdfTable:
    s_min: int
    s_max: int
    cdf: tuple  # len = n_symbols + 1 (+1 more when escape is enabled)
    escape: bool = False

    @property
    def n_symbols(self):
        return self.s_max - self.s_min + 1

    def interval(self, index: int):
        return self.cdf[index], self.cdf[index + 1] - self.cdf[index]

    @property
    def escape_index(self):
        return self.n_symbols if self.escape else None

    def probabilities(self):
        c = np.asarray(self.cdf, dtype=np.float64)
        return np.diff(c) / TOTAL


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer counts summing to 2**16 with every entry >= 1.

    Each symbol gets floor(p * (TOTAL - n)) + 1; the leftover goes to the
    mode so symmetric pmfs stay symmetric.
    """
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = pmf.size
    if n < 1 or n > TOTAL:
        raise ValueError("pmf size out of range")
    s = pmf.sum()
    pmf = pmf / s if s > 0 else np.full(n, 1.0 / n)
    counts = np.floor(pmf * (TOTAL - n)).astype(np.int64) + 1
    left = TOTAL - int(counts.sum())
    counts[int(np.argmax(pmf))] += left
    return counts


def _table_from_pmf(s_min, s_max, pmf, tail):
    if tail is not None:
        pmf = np.append(pmf, tail)
    counts = quantize_pmf(pmf)
    cdf = np.concatenate([[0], np.cumsum(counts)])
    return CdfTable(int(s_min), int(s_max), tuple(int(c) for c in cdf), tail is not None)


def _gaussian_cdf_np(t):
    from scipy.special import ndtr

    return ndtr(t)


def build_cdf(
    kind: str, params, symbol_range=None, escape: bool = False, observed=None
) -> CdfTable:
    """Quantized CDF for one scalar distribution.

    ``kind``: ``"gaussian"`` (params = (mu, sigma)), ``"logistic"``
    (params = (loc, scale)) or ``"uniform"`` (params ignored).  Without an
    explicit ``symbol_range`` the support is the distribution's 8-sigma
    window clipped to [-128, 127].  ``escape`` appends one symbol carrying the
    out-of-range tail mass.
    """
    if symbol_range is None:
        symbol_range = default_range(kind, params)
    s_min, s_max = int(symbol_range[0]), int(symbol_range[1])
    if s_max < s_min:
        raise ValueError("empty symbol range")
    if observed is not None and not escape:
        bad = [int(v) for v in observed if not s_min <= int(v) <= s_max]
        if bad:
            raise ValueError(f"symbol {bad[0]} outside table range [{s_min}, {s_max}]")
    sym = np.arange(s_min, s_max + 1, dtype=np.float64)
    if kind == "uniform":
        pmf = np.ones(sym.size)
        tail = 1e-9 if escape else None
        return _table_from_pmf(s_min, s_max, pmf, tail)
    upper, lower = _cdf_pair(kind, params, sym)
    pmf = upper - lower
    tail = None
    if escape:
        tail = max(1.0 - (upper[-1] - lower[0]), 0.0)
    return _table_from_pmf(s_min, s_max, pmf, tail)


def _cdf_pair(kind, params, sym):
    a, b = float(params[0]), float(params[1])
    if kind == "gaussian":
        b = max(b, SCALE_MIN)
        return _gaussian_cdf_np((sym + 0.5 - a) / b), _gaussian_cdf_np((sym - 0.5 - a) / b)
    if kind == "logistic":
        from scipy.special import expit

        return expit((sym + 0.5 - a) / b), expit((sym - 0.5 - a) / b)
    raise ValueError(f"unknown kind {kind!r}")


def default_range(kind, params):
    a, b = float(params[0]), float(params[1])
    if kind == "gaussian":
        b = max(b, SCALE_MIN)
        half = TAIL_SIGMAS * b
    elif kind == "logistic":
        # tail mass beyond t is ~exp(-t / scale)
        half = 3.0 * TAIL_SIGMAS * b
    else:
        return SYMBOL_MIN, SYMBOL_MAX
    lo = math.floor(a - half)
    hi = math.ceil(a + half)
    lo = min(max(lo, SYMBOL_MIN), SYMBOL_MAX)
    hi = min(max(hi, SYMBOL_MIN), SYMBOL_MAX)
    return lo, max(lo, hi)


def build_tables(kind: str, loc: np.ndarray, scale: np.ndarray, escape: bool = True):
    """One escaped table per element of the flattened parameter arrays."""
    loc = np.asarray(loc, dtype=np.float64).reshape(-1)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    cache = {}
    out = []
    for a, b in zip(loc.tolist(), scale.tolist()):
        key = (a, b)
        t = cache.get(key)
        if t is None:
            t = build_cdf(kind, (a, b), escape=escape)
            cache[key] = t
        out.append(t)
    return out
