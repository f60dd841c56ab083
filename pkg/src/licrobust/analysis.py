"""Measurement and attribution: performance variation, local maps, entropy
causal intervention (ECI) and layer-wise distance magnify ratios (LDMR/CDMR).
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import diffcore as dc
from .diffcore import sum64
from .models import CompressionModel, Family, decode, encode, gaussian_likelihood, trace

LN2 = math.log(2.0)


def valid_reconstruction(x_hat: torch.Tensor) -> torch.Tensor:
    """Reconstruction as delivered: non-finite pixels become 255, the rest is
    clipped to the 8-bit range."""
    bad = ~torch.isfinite(x_hat)
    out = torch.where(bad, torch.ones_like(x_hat), x_hat)
    return out.clamp(0.0, 1.0)


def _rd_eval(model, x):
    with torch.no_grad():
        bundle = encode(model, x, "round")
        x_hat = decode(model, bundle.y_hat, check_finite=False)
    n_pix = x.shape[0] * x.shape[2] * x.shape[3]
    rate_y = float(-sum64(bundle.loglik_y) / LN2 / n_pix)
    rate_z = 0.0 if bundle.loglik_z is None else float(-sum64(bundle.loglik_z) / LN2 / n_pix)
    err = (valid_reconstruction(x_hat).to(torch.float64) - x.to(torch.float64)) * 255.0
    return bundle, x_hat, rate_y + rate_z, err


def psnr(mse: float) -> float:
    return math.inf if mse <= 0 else 10.0 * math.log10(255.0**2 / mse)


@dataclass
class RDReport:
    rate: float
    rate_adv: float
    dist: float
    dist_adv: float
    family: str = ""
    lambda_index: int = -1
    direction: str = ""
    image_id: str = ""
    attack: str = ""

    @property
    def delta_rate(self) -> float:
        return self.rate_adv - self.rate

    @property
    def delta_dist(self) -> float:
        return self.dist_adv - self.dist

    @property
    def psnr(self) -> float:
        return psnr(self.dist)

    @property
    def psnr_adv(self) -> float:
        return psnr(self.dist_adv)

    def row(self) -> dict:
        r = asdict(self)
        r.update(
            delta_rate=self.delta_rate,
            delta_dist=self.delta_dist,
            psnr=self.psnr,
            psnr_adv=self.psnr_adv,
        )
        return r


REPORT_COLUMNS = [
    "attack", "family", "lambda_index", "direction", "image_id",
    "rate", "rate_adv", "delta_rate", "dist", "dist_adv", "delta_dist", "psnr", "psnr_adv",
]


def perf_variation(model: CompressionModel, x, x_a, **ids) -> RDReport:
    if x.shape != x_a.shape:
        raise dc.ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_a.shape)}")
    _, _, r, err = _rd_eval(model, x)
    _, _, ra, err_a = _rd_eval(model, x_a)
    d = float(sum64(err * err) / err.numel())
    da = float(sum64(err_a * err_a) / err_a.numel())
    return RDReport(r, ra, d, da, **ids)


@dataclass
class Aggregate:
    mu_rate: float
    mu_dist: float
    sd_rate: float
    sd_dist: float
    n: int


def aggregate(reports: Sequence[RDReport], by: str = "all") -> Dict[object, Aggregate]:
    """Population mean/std of the deltas grouped by ``all``, ``direction`` or ``submodel``."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keyfn = {
        "all": lambda r: "all",
        "direction": lambda r: r.direction,
        "submodel": lambda r: (r.family, r.lambda_index),
    }[by]
    groups = defaultdict(list)
    for r in reports:
        groups[keyfn(r)].append(r)
    out = {}
    for k, rs in groups.items():
        dr = np.array([r.delta_rate for r in rs])
        dd = np.array([r.delta_dist for r in rs])
        out[k] = Aggregate(float(dr.mean()), float(dd.mean()), float(dr.std()), float(dd.std()), len(rs))
    return out


# ---------------------------------------------------------------------------
# local maps


@dataclass
class LocalMaps:
    rate: np.ndarray  # bits per latent cell, adversarial minus benign
    dist: np.ndarray  # squared error per pixel (0-255 scale), adversarial minus benign
    n_pixels: int

    def rate_bpp(self) -> float:
        return float(self.rate.sum() / self.n_pixels)

    def dist_mean(self) -> float:
        return float(self.dist.mean())


def _cell_bits(bundle) -> np.ndarray:
    by = (-bundle.loglik_y[0].to(torch.float64) / LN2).sum(0).numpy()
    if bundle.loglik_z is None:
        return by
    bz = (-bundle.loglik_z[0].to(torch.float64) / LN2).sum(0).numpy()
    h, w = by.shape
    zh, zw = bz.shape
    ri = np.minimum(np.arange(h) * zh // h, zh - 1)
    ci = np.minimum(np.arange(w) * zw // w, zw - 1)
    counts = np.zeros((zh, zw))
    np.add.at(counts, (ri[:, None].repeat(w, 1), ci[None, :].repeat(h, 0)), 1.0)
    spread = bz / np.maximum(counts, 1.0)
    return by + spread[ri][:, ci]


def local_maps(model: CompressionModel, x, x_a) -> LocalMaps:
    if x.shape != x_a.shape:
        raise dc.ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_a.shape)}")
    if x.shape[0] != 1:
        raise ValueError("local maps are computed per image")
    b, _, _, err = _rd_eval(model, x)
    ba, _, _, err_a = _rd_eval(model, x_a)
    rate = _cell_bits(ba) - _cell_bits(b)
    d = (err_a[0] ** 2).mean(0) - (err[0] ** 2).mean(0)
    return LocalMaps(rate, d.numpy(), x.shape[2] * x.shape[3])


def spatial_kurtosis(m: np.ndarray) -> float:
    v = np.asarray(m, dtype=np.float64).ravel()
    c = v - v.mean()
    s2 = (c**2).mean()
    return float((c**4).mean() / (s2 * s2)) if s2 > 0 else 0.0


def pool_to_cells(pixel_map: np.ndarray, factor: int = 8) -> np.ndarray:
    h, w = pixel_map.shape
    return pixel_map.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def write_grid(m: np.ndarray, path):
    np.savetxt(path, m, fmt="%.6g")


def write_pgm(m: np.ndarray, path):
    """8-bit heat image of |m| scaled to its own maximum."""
    a = np.abs(np.asarray(m, dtype=np.float64))
    top = a.max()
    img = np.zeros(a.shape, dtype=np.uint8) if top <= 0 else np.round(255 * a / top).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


# ---------------------------------------------------------------------------
# entropy causal intervention

BRANCHES = ("y_s", "y_c", "y_h")


@dataclass
class EciReport:
    do_set: Tuple[str, ...]
    bitrate_y: float
    bitrate_z: Optional[float]
    delta_mean: Optional[float]
    scale: Optional[float]

    @property
    def bitrate(self) -> float:
        return self.bitrate_y + (self.bitrate_z or 0.0)


def supported_branches(model: CompressionModel) -> Tuple[str, ...]:
    if model.family == Family.FACTORIZED:
        return ("y_s",)
    if model.family == Family.HYPER_S:
        return ("y_s", "y_h")
    return BRANCHES


def _branches(model, x):
    y = model.analysis(x)
    y_hat = torch.round(y)
    if model.family == Family.FACTORIZED:
        return y_hat, None
    z_hat = torch.round(model.hyper_analysis(y))
    return y_hat, z_hat


def eci(model: CompressionModel, x, x_a, do_set: Iterable[str] = ()) -> EciReport:
    """Bitrate of a hybrid pass where branches in ``do_set`` carry benign features.

    ``y_s`` swaps the coded samples, ``y_c`` the context-transform input and
    ``y_h`` the hyper-latent (hence everything the hyper decoder produces).
    """
    do = tuple(sorted(set(do_set), key=BRANCHES.index))
    allowed = supported_branches(model)
    for b in do:
        if b not in allowed:
            raise ValueError(f"do({b}) is not defined for {model.family.name}")
    n_pix = x.shape[0] * x.shape[2] * x.shape[3]
    with torch.no_grad():
        yb, zb = _branches(model, x)
        ya, za = _branches(model, x_a)
        y_code = yb if "y_s" in do else ya
        if model.family == Family.FACTORIZED:
            ll = torch.log(model.prior_y.likelihood(y_code))
            return EciReport(do, float(-sum64(ll) / LN2 / n_pix), None, None, None)
        ctx_in = yb if "y_c" in do else ya
        z_hat = zb if "y_h" in do else za
        mu, sigma = model.params_from(model.hyper_synthesis(z_hat, ya.shape[-2:]), ctx_in)
        ll_y = torch.log(gaussian_likelihood(y_code, mu, sigma))
        ll_z = torch.log(model.prior_z.likelihood(z_hat))
        delta_mean = None
        if model.family == Family.HYPER_MC:
            mu_b, _ = model.params_from(model.hyper_synthesis(zb, yb.shape[-2:]), yb)
            delta_mean = float((mu - mu_b).abs().to(torch.float64).mean())
        return EciReport(
            do,
            float(-sum64(ll_y) / LN2 / n_pix),
            float(-sum64(ll_z) / LN2 / n_pix),
            delta_mean,
            float(sigma.clamp_min(0.04).to(torch.float64).mean()),
        )


def eci_table(model: CompressionModel, x, x_a) -> List[EciReport]:
    """No intervention, then each supported single-branch intervention."""
    rows = [eci(model, x, x_a, ())]
    rows += [eci(model, x, x_a, (b,)) for b in supported_branches(model)]
    return rows


# ---------------------------------------------------------------------------
# LDMR / CDMR


class ZeroDistanceError(ZeroDivisionError):
    def __init__(self, layer):
        super().__init__(f"inputs coincide entering layer {layer}; LDMR undefined")
        self.layer = layer


@dataclass
class MagnifyProfile:
    names: List[str]
    interval: List[float]  # LDMR_[i,I] for i = 0..I
    ldmr: List[float]  # LDMR_i
    cdmr: List[float]  # CDMR_i

    @property
    def final_cdmr(self) -> float:
        return self.cdmr[-1]

    def rows(self):
        return [
            {"layer": n, "ldmr": l, "cdmr": c}
            for n, l, c in zip(self.names, self.ldmr, self.cdmr)
        ]


def _l1(a, b):
    return float((a.to(torch.float64) - b.to(torch.float64)).abs().mean())


def ldmr_cdmr(model: CompressionModel, x, x_a) -> MagnifyProfile:
    """Magnification of the x/x_a distance by each distortion-path layer.

    LDMR_[i,I] compares the distance between re-encoded reconstructions at the
    input of layer i with the distance between the direct encodings there.
    The empty tail interval LDMR_[I+1,I] is 1, so the per-layer ratios
    telescope to CDMR_I = LDMR_[0,I].
    """
    layers = model.distortion_layers()
    names = [n for n, _ in layers]
    with torch.no_grad(), dc.allow_nonfinite():
        tx, ta = trace(model, x), trace(model, x_a)
        rx, ra = trace(model, tx[-1]), trace(model, ta[-1])
    interval = []
    for i, name in enumerate(names):
        den = _l1(ta[i], tx[i])
        if den == 0.0 or not math.isfinite(den):
            raise ZeroDistanceError(name)
        interval.append(_l1(ra[i], rx[i]) / den)
    tail = interval[1:] + [1.0]
    ldmr = [a / b if b != 0 else math.inf for a, b in zip(interval, tail)]
    cdmr, acc = [], 1.0
    for v in ldmr:
        acc *= v
        cdmr.append(acc)
    return MagnifyProfile(names, interval, ldmr, cdmr)


def final_cdmr(model: CompressionModel, x, x_a) -> float:
    """CDMR_I computed directly as LDMR_[0,I].

    Needs only x != x_a, so it stays defined when the perturbation is
    quantized away and the per-layer profile has zero denominators.
    """
    den = _l1(x_a, x)
    if den == 0.0:
        raise ZeroDistanceError(model.distortion_layers()[0][0])
    with torch.no_grad(), dc.allow_nonfinite():
        rx, ra = decode(model, encode(model, x, "round").y_hat), decode(model, encode(model, x_a, "round").y_hat)
    return _l1(ra, rx) / den


# ---------------------------------------------------------------------------
# report files


def write_reports_csv(reports: Iterable[RDReport], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({k: _fmt(v) for k, v in r.row().items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_profile_csv(profile: MagnifyProfile, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "ldmr", "cdmr"])
        for r in profile.rows():
            w.writerow([r["layer"], repr(r["ldmr"]), repr(r["cdmr"])])


def write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
