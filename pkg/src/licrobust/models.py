"""Toy learned-image-compression zoo.

All three families share one convolutional autoencoder (three stride-2
stages with GDN in the analysis transform, mirrored with IGDN in the
synthesis transform) and differ only in the entropy model:

* ``FACTORIZED``: per-channel logistic prior on y_hat.
* ``HYPER_S``: zero-mean Gaussian whose scale comes from a hyperprior.
* ``HYPER_MC``: mean and scale from the hyperprior joined with a causal
  (masked 3x3) context over y_hat.
"""
from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffcore as dc
from .diffcore import sum64
from .entropy import FactorizedPrior, gaussian_likelihood

WIDTH = 32
LATENT = 48
HYPER = 32
BETA_MIN = 1e-6


class Family(enum.IntEnum):
    FACTORIZED = 0
    HYPER_S = 1
    HYPER_MC = 2


class Conv(nn.Module):
    def __init__(self, cin, cout, k=5, stride=2, transpose=False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        self.transpose = transpose
        w = torch.empty(cout, cin, k, k) if not transpose else torch.empty(cin, cout, k, k)
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        if self.transpose:
            return dc.conv2d_transpose(x, self.weight, self.stride, self.padding, self.bias)
        return dc.conv2d(x, self.weight, self.stride, self.padding, self.bias)


class GDN(nn.Module):
    """GDN/IGDN with beta = b^2 + beta_min and gamma = g^2."""

    def __init__(self, channels, inverse=False):
        super().__init__()
        self.inverse = inverse
        self.beta_raw = nn.Parameter(torch.ones(channels))
        self.gamma_raw = nn.Parameter(math.sqrt(0.1) * torch.eye(channels))

    def effective(self):
        return self.beta_raw**2 + BETA_MIN, self.gamma_raw**2

    def forward(self, x):
        beta, gamma = self.effective()
        return dc.gdn(x, beta, gamma, self.inverse)


class MaskedConv(nn.Module):
    """3x3 convolution that only sees raster-order-previous positions."""

    def __init__(self, cin, cout, k=3):
        super().__init__()
        self.padding = k // 2
        w = torch.empty(cout, cin, k, k)
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout))
        mask = torch.ones(1, 1, k, k)
        mask[..., k // 2, k // 2 :] = 0
        mask[..., k // 2 + 1 :, :] = 0
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x):
        return dc.conv2d(x, self.weight * self.mask, 1, self.padding, self.bias)


@dataclass(frozen=True)
class LayerHandle:
    index: int
    name: str


@dataclass
class LatentBundle:
    y: torch.Tensor
    y_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    loglik_y: torch.Tensor
    z: Optional[torch.Tensor] = None
    z_hat: Optional[torch.Tensor] = None
    loglik_z: Optional[torch.Tensor] = None


@dataclass
class RD:
    rate: torch.Tensor  # bpp, float64 scalar
    distortion: torch.Tensor  # MSE on the 0-255 scale
    x_hat: torch.Tensor
    bundle: LatentBundle
    rate_y: torch.Tensor
    rate_z: torch.Tensor


class CompressionModel(nn.Module):
    def __init__(self, family: Family, lmbda: float):
        super().__init__()
        self.family = Family(family)
        self.lmbda = float(lmbda)
        self.ga = nn.ModuleDict(
            {
                "conv0": Conv(3, WIDTH),
                "gdn0": GDN(WIDTH),
                "conv1": Conv(WIDTH, WIDTH),
                "gdn1": GDN(WIDTH),
                "conv2": Conv(WIDTH, LATENT),
            }
        )
        self.gs = nn.ModuleDict(
            {
                "tconv0": Conv(LATENT, WIDTH, transpose=True),
                "igdn0": GDN(WIDTH, inverse=True),
                "tconv1": Conv(WIDTH, WIDTH, transpose=True),
                "igdn1": GDN(WIDTH, inverse=True),
                "tconv2": Conv(WIDTH, WIDTH, transpose=True),
                "igdn2": GDN(WIDTH, inverse=True),
                "conv_out": Conv(WIDTH, 3, k=3, stride=1),
            }
        )
        if self.family == Family.FACTORIZED:
            self.prior_y = FactorizedPrior(LATENT)
        else:
            param_out = LATENT if self.family == Family.HYPER_S else 2 * LATENT
            self.ha = nn.ModuleList(
                [Conv(LATENT, HYPER, k=3, stride=1), Conv(HYPER, HYPER), Conv(HYPER, HYPER)]
            )
            self.hs = nn.ModuleList(
                [
                    Conv(HYPER, HYPER, transpose=True),
                    Conv(HYPER, HYPER, transpose=True),
                    Conv(HYPER, param_out, k=3, stride=1),
                ]
            )
            self.prior_z = FactorizedPrior(HYPER)
        if self.family == Family.HYPER_MC:
            self.context = MaskedConv(LATENT, 2 * LATENT)
            self.entropy_params = nn.ModuleList(
                [
                    Conv(4 * LATENT, 3 * LATENT, k=1, stride=1),
                    Conv(3 * LATENT, 2 * LATENT, k=1, stride=1),
                ]
            )

    # -- distortion path -------------------------------------------------
    def distortion_layers(self) -> List[Tuple[str, Callable]]:
        layers = [(f"ga.{k}", m) for k, m in self.ga.items()]
        layers.append(("Q", lambda t: dc.quantize(t, "round_ste")))
        layers += [(f"gs.{k}", m) for k, m in self.gs.items()]
        return layers

    def analysis(self, x):
        for m in self.ga.values():
            x = m(x)
        return x

    def synthesis(self, y_hat, check=True):
        x = y_hat
        if not check:
            with dc.allow_nonfinite():
                for m in self.gs.values():
                    x = m(x)
            return x
        for name, m in self.gs.items():
            try:
                x = m(x)
            except dc.NonFiniteError as err:
                raise dc.NonFiniteError(f"gs.{name}") from err
        return x

    # -- entropy side ----------------------------------------------------
    def hyper_analysis(self, y):
        h = torch.abs(y) if self.family == Family.HYPER_S else y
        h = F.relu(self.ha[0](h))
        h = F.relu(self.ha[1](h))
        return self.ha[2](h)

    def hyper_synthesis(self, z_hat, size=None):
        """Entropy features for a latent grid of ``size`` (h, w).

        Two stride-2 stages overshoot when h or w is not a multiple of 4; the
        surplus rows/columns are cropped.
        """
        h = F.relu(self.hs[0](z_hat))
        h = F.relu(self.hs[1](h))
        h = self.hs[2](h)
        if size is not None:
            h = h[..., : size[0], : size[1]]
        return h

    def params_from(self, hyper_feat, ctx_input):
        """(mu, sigma) from hyper features and the context-transform input."""
        if self.family == Family.HYPER_S:
            return torch.zeros_like(hyper_feat), F.softplus(hyper_feat)
        ctx = self.context(ctx_input)
        h = torch.cat([hyper_feat, ctx], dim=1)
        h = F.relu(self.entropy_params[0](h))
        h = self.entropy_params[1](h)
        mu, s = h.chunk(2, dim=1)
        return mu, F.softplus(s)


def _check_input(x):
    if x.dim() != 4 or x.shape[1] != 3:
        raise dc.ShapeError(f"expected N x 3 x H x W image, got {tuple(x.shape)}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise dc.ShapeError(f"image sides must be divisible by 8, got {tuple(x.shape[2:])}")


def encode(model: CompressionModel, x, quant_mode="round_ste", generator=None) -> LatentBundle:
    _check_input(x)
    y = model.analysis(x)
    dc.check_finite(y, "ga")
    y_hat = dc.quantize(y, quant_mode, generator)
    if model.family == Family.FACTORIZED:
        mu, sigma = model.prior_y.params(y_hat)
        ll = torch.log(model.prior_y.likelihood(y_hat))
        return LatentBundle(y, y_hat, mu, sigma, ll)
    z = model.hyper_analysis(y)
    z_hat = dc.quantize(z, quant_mode, generator)
    ll_z = torch.log(model.prior_z.likelihood(z_hat))
    mu, sigma = model.params_from(model.hyper_synthesis(z_hat, y_hat.shape[-2:]), y_hat)
    ll_y = torch.log(gaussian_likelihood(y_hat, mu, sigma))
    return LatentBundle(y, y_hat, mu, sigma, ll_y, z, z_hat, ll_z)


def decode(model: CompressionModel, y_hat, check_finite=True):
    """Reconstruction g_s(y_hat); values are not clamped."""
    if y_hat.dim() != 4 or y_hat.shape[1] != LATENT:
        raise dc.ShapeError(f"expected N x {LATENT} x h x w latents")
    return model.synthesis(y_hat, check=check_finite)


def distortion(x_hat, x):
    """MSE on the 0-255 scale (float64 accumulation)."""
    d = (x_hat - x) * 255.0
    return sum64(d * d) / d.numel()


def forward_rd(model: CompressionModel, x, quant_mode="round_ste", generator=None, check_finite=True) -> RD:
    bundle = encode(model, x, quant_mode, generator)
    x_hat = decode(model, bundle.y_hat, check_finite=check_finite)
    n_pix = x.shape[0] * x.shape[2] * x.shape[3]
    ln2 = math.log(2.0)
    rate_y = -sum64(bundle.loglik_y) / ln2 / n_pix
    if bundle.loglik_z is not None:
        rate_z = -sum64(bundle.loglik_z) / ln2 / n_pix
    else:
        rate_z = torch.zeros((), dtype=torch.float64)
    return RD(rate_y + rate_z, distortion(x_hat, x), x_hat, bundle, rate_y, rate_z)


def layer_list(model: CompressionModel) -> List[LayerHandle]:
    return [LayerHandle(i, name) for i, (name, _) in enumerate(model.distortion_layers())]


def partial_encode(model: CompressionModel, x, upto):
    """Apply distortion-path layers 0..upto-1 (``upto`` may be a LayerHandle)."""
    idx = upto.index if isinstance(upto, LayerHandle) else int(upto)
    layers = model.distortion_layers()
    if not 0 <= idx <= len(layers):
        raise IndexError(f"layer index {idx} outside 0..{len(layers)}")
    for _, fn in layers[:idx]:
        x = fn(x)
    return x


def trace(model: CompressionModel, x) -> List[torch.Tensor]:
    """Every intermediate of the distortion path, input first."""
    out = [x]
    for _, fn in model.distortion_layers():
        x = fn(x)
        out.append(x)
    return out


# ---------------------------------------------------------------------------
# checkpoint format: "LICM", version u8, family u8, lambda f64, then blocks of
# (name length u32, name utf-8, rank u32, dims u32 * rank, float32 data), all LE

CKPT_MAGIC = b"LICM"
CKPT_VERSION = 1


def save_checkpoint(model: CompressionModel, path_or_buf):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<BBd", CKPT_VERSION, int(model.family), model.lmbda))
    for name, t in model.state_dict().items():
        raw = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "wb") as f:
            f.write(data)
    return data


def load_checkpoint(path_or_bytes) -> CompressionModel:
    import numpy as np

    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a LICM checkpoint")
    version, family, lmbda = struct.unpack_from("<BBd", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = CompressionModel(Family(family), lmbda)
    pos = 4 + struct.calcsize("<BBd")
    state = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


def model_bytes(model: CompressionModel) -> bytes:
    return save_checkpoint(model, io.BytesIO())
