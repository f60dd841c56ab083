"""32-bit range coder with 16-bit probabilities and the LICB container.

The encoder propagates carries into already-written bytes, so the range stays
in [2**24, 2**32) after normalization and the only overhead beyond the model
cost is the four-byte flush.  That flush doubles as the stream sentinel: a
decoder that followed the encoder exactly ends with a zero code register.
"""
from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch

from .entropy import PRECISION, TOTAL, CdfTable, build_cdf, build_tables
from .models import Family, decode, encode

MASK32 = 0xFFFFFFFF
TOP = 1 << 24
SENTINEL_BYTES = 4


class StreamError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while i >= 0:
            if self.out[i] == 0xFF:
                self.out[i] = 0
                i -= 1
            else:
                self.out[i] += 1
                return
        raise StreamError("carry out of stream head")

    def encode(self, cum: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        if self.low > MASK32:
            self.low &= MASK32
            self._carry()
        while self.range < TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range <<= 8

    def encode_raw16(self, value: int):
        self.encode(value & 0xFFFF, 1)

    def finish(self) -> bytes:
        self.out += self.low.to_bytes(4, "big")
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < SENTINEL_BYTES:
            raise StreamError("stream shorter than its flush")
        self.data = data
        self.pos = 4
        self.range = MASK32
        self.code = int.from_bytes(data[:4], "big")

    def _next_byte(self):
        if self.pos >= len(self.data):
            raise StreamError("truncated stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise StreamError("code register out of range (corrupt stream)")
        return v

    def consume(self, cum: int, freq: int):
        r = self.range >> PRECISION
        self.code -= r * cum
        self.range = r * freq
        if self.code < 0 or self.code >= self.range:
            raise StreamError("code register left its interval (corrupt stream)")
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8

    def decode(self, cdf: Sequence[int]) -> int:
        v = self.target()
        idx = bisect.bisect_right(cdf, v) - 1
        self.consume(cdf[idx], cdf[idx + 1] - cdf[idx])
        return idx

    def decode_raw16(self) -> int:
        v = self.target()
        self.consume(v, 1)
        return v

    def check_sentinel(self):
        if self.code != 0 or self.pos != len(self.data):
            raise StreamError("sentinel mismatch: stream does not match tables")


def _zigzag(v: int) -> int:
    return (v << 1) ^ (v >> 63) if v < 0 else v << 1


def _unzigzag(u: int) -> int:
    return (u >> 1) ^ -(u & 1)


TableArg = Union[CdfTable, Sequence[CdfTable]]


def _table_at(cdfs: TableArg, i: int) -> CdfTable:
    return cdfs if isinstance(cdfs, CdfTable) else cdfs[i]


def encode_symbols(enc: RangeEncoder, symbols: Iterable[int], cdfs: TableArg):
    for i, s in enumerate(symbols):
        t = _table_at(cdfs, i)
        s = int(s)
        if t.s_min <= s <= t.s_max:
            k = s - t.s_min
            enc.encode(t.cdf[k], t.cdf[k + 1] - t.cdf[k])
        elif t.escape:
            k = t.n_symbols
            enc.encode(t.cdf[k], t.cdf[k + 1] - t.cdf[k])
            u = _zigzag(s)
            if u > MASK32:
                raise StreamError(f"escaped symbol {s} exceeds 32 bits")
            enc.encode_raw16(u >> 16)
            enc.encode_raw16(u & 0xFFFF)
        else:
            raise StreamError(f"symbol {s} outside [{t.s_min}, {t.s_max}] and no escape")


def decode_symbols(dec: RangeDecoder, cdfs: TableArg, count: int) -> List[int]:
    out = []
    for i in range(count):
        t = _table_at(cdfs, i)
        k = dec.decode(t.cdf)
        if t.escape and k == t.n_symbols:
            u = (dec.decode_raw16() << 16) | dec.decode_raw16()
            out.append(_unzigzag(u))
        else:
            out.append(t.s_min + k)
    return out


def encode_stream(symbols: Sequence[int], cdfs: TableArg) -> bytes:
    """Range-code ``symbols``; ``cdfs`` is one shared table or one per symbol."""
    enc = RangeEncoder()
    encode_symbols(enc, symbols, cdfs)
    return enc.finish()


def decode_stream(data: bytes, cdfs: TableArg, count: int) -> List[int]:
    dec = RangeDecoder(data)
    out = decode_symbols(dec, cdfs, count)
    dec.check_sentinel()
    return out


# ---------------------------------------------------------------------------
# container

MAGIC = b"LICB"
VERSION = 1
_HEADER = struct.Struct("<4sBBBII")


@dataclass
class Bitstream:
    family: int
    lambda_index: int
    height: int
    width: int
    z_segment: bytes
    y_segment: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, self.version, self.family, self.lambda_index, self.height, self.width
        )
        return b"".join(
            [
                head,
                struct.pack("<I", len(self.z_segment)),
                self.z_segment,
                struct.pack("<I", len(self.y_segment)),
                self.y_segment,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size + 8:
            raise StreamError("bitstream shorter than its header")
        magic, version, family, lam, h, w = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise StreamError("bad magic")
        if version != VERSION:
            raise StreamError(f"unsupported bitstream version {version}")
        pos = _HEADER.size
        segs = []
        for _ in range(2):
            if pos + 4 > len(data):
                raise StreamError("truncated segment length")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise StreamError("truncated segment")
            segs.append(bytes(data[pos : pos + n]))
            pos += n
        if pos != len(data):
            raise StreamError("trailing bytes after ŷ segment")
        return cls(family, lam, h, w, segs[0], segs[1], version)

    @property
    def payload_bits(self) -> int:
        """Bits of entropy-coded data, excluding header and length prefixes."""
        return 8 * (len(self.z_segment) + len(self.y_segment))


# ---------------------------------------------------------------------------
# image files


def _np(t):
    return t.detach().to(torch.float64).cpu().numpy()


def _factorized_tables(prior, channels_like):
    loc, scale = prior.loc.detach(), prior.scale().detach()
    return [build_cdf("logistic", (float(a), float(b)), escape=True) for a, b in zip(loc, scale)]


def _z_stream(model, z_hat):
    """Symbols and tables for the hyper-latent (channel-major raster order)."""
    tables = _factorized_tables(model.prior_z, z_hat)
    _, c, h, w = z_hat.shape
    per = [tables[ch] for ch in range(c) for _ in range(h * w)]
    return per


def _context_params_at(model, partial, hyper_feat, i, j):
    mu, sigma = model.params_from(hyper_feat, partial)
    return mu[0, :, i, j], sigma[0, :, i, j]


def compress_file(model, image, lambda_index: int = 0) -> Bitstream:
    """Entropy-code one image (1 x 3 x H x W in [0, 1]) into a container."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ValueError("compress_file codes one image at a time")
    _, _, H, W = image.shape
    with torch.no_grad():
        bundle = encode(model, image, "round")
        y_hat = bundle.y_hat
        ys = [int(v) for v in torch.round(y_hat).to(torch.int64).reshape(-1).tolist()]
        if model.family == Family.FACTORIZED:
            tables = _factorized_tables(model.prior_y, y_hat)
            hw = y_hat.shape[2] * y_hat.shape[3]
            y_tables = [tables[c] for c in range(y_hat.shape[1]) for _ in range(hw)]
            return Bitstream(int(model.family), lambda_index, H, W, b"", encode_stream(ys, y_tables))
        z_hat = bundle.z_hat
        zs = [int(v) for v in torch.round(z_hat).to(torch.int64).reshape(-1).tolist()]
        z_seg = encode_stream(zs, _z_stream(model, z_hat))
        hyper_feat = model.hyper_synthesis(z_hat, y_hat.shape[-2:])
        if model.family == Family.HYPER_S:
            _, sigma = model.params_from(hyper_feat, None)
            tables = build_tables("gaussian", np.zeros(sigma.numel()), _np(sigma))
            return Bitstream(int(model.family), lambda_index, H, W, z_seg, encode_stream(ys, tables))
        # HYPER_MC: simulate the decoder's sequential state so both sides
        # evaluate the context transform on bit-identical inputs
        enc = RangeEncoder()
        _, c, h, w = y_hat.shape
        partial = torch.zeros_like(y_hat)
        for i in range(h):
            for j in range(w):
                mu, sigma = _context_params_at(model, partial, hyper_feat, i, j)
                tables = build_tables("gaussian", _np(mu), _np(sigma))
                encode_symbols(enc, [int(v) for v in y_hat[0, :, i, j].tolist()], tables)
                partial[0, :, i, j] = y_hat[0, :, i, j]
        return Bitstream(int(model.family), lambda_index, H, W, z_seg, enc.finish())


def decompress_file(models, stream: Union[Bitstream, bytes]):
    """Decode a container with the submodel its header names.

    ``models`` maps lambda index to model (a sequence works too).  Returns
    ``(x_hat, y_hat)``.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.from_bytes(stream)
    try:
        model = models[stream.lambda_index]
    except (IndexError, KeyError):
        raise StreamError(f"no submodel for lambda index {stream.lambda_index}") from None
    if int(model.family) != stream.family:
        raise StreamError("family tag does not match the submodel")
    from .models import LATENT

    h, w = stream.height // 8, stream.width // 8
    with torch.no_grad():
        if model.family == Family.FACTORIZED:
            tables = _factorized_tables(model.prior_y, None)
            y_tables = [tables[c] for c in range(LATENT) for _ in range(h * w)]
            ys = decode_stream(stream.y_segment, y_tables, LATENT * h * w)
            y_hat = torch.tensor(ys, dtype=torch.float32).view(1, LATENT, h, w)
        else:
            zh, zw = _hyper_shape(h, w)
            zc = model.prior_z.loc.numel()
            z_tables = [t for t in _factorized_tables(model.prior_z, None) for _ in range(zh * zw)]
            zs = decode_stream(stream.z_segment, z_tables, zc * zh * zw)
            z_hat = torch.tensor(zs, dtype=torch.float32).view(1, zc, zh, zw)
            hyper_feat = model.hyper_synthesis(z_hat, (h, w))
            if model.family == Family.HYPER_S:
                _, sigma = model.params_from(hyper_feat, None)
                tables = build_tables("gaussian", np.zeros(sigma.numel()), _np(sigma))
                ys = decode_stream(stream.y_segment, tables, LATENT * h * w)
                y_hat = torch.tensor(ys, dtype=torch.float32).view(1, LATENT, h, w)
            else:
                dec = RangeDecoder(stream.y_segment)
                y_hat = torch.zeros(1, LATENT, h, w)
                for i in range(h):
                    for j in range(w):
                        mu, sigma = _context_params_at(model, y_hat, hyper_feat, i, j)
                        tables = build_tables("gaussian", _np(mu), _np(sigma))
                        vals = decode_symbols(dec, tables, LATENT)
                        y_hat[0, :, i, j] = torch.tensor(vals, dtype=torch.float32)
                dec.check_sentinel()
        x_hat = decode(model, y_hat, check_finite=False)
    return x_hat, y_hat


def _hyper_shape(h, w):
    # two stride-2 stages with padding k // 2: ceil halving twice
    for _ in range(2):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w
