"""Image ingestion and export.  Binary PPM is handled natively; PNG goes
through Pillow when it is installed."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageRecord:
    pixels: torch.Tensor  # 1 x 3 x H x W float32 in [0, 1]
    path: str
    bit_depth: int

    @property
    def size(self):
        return tuple(self.pixels.shape[-2:])

    def check_model_input(self, min_side: int = 64):
        h, w = self.size
        if min(h, w) < min_side:
            raise ImageFormatError(f"{self.path}: sides must be >= {min_side}, got {h}x{w}")


def _ppm_tokens(data: bytes):
    """Yield (token, end_offset) for the four header fields."""
    pos, out = 0, []
    while len(out) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        out.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("PPM header must end with one whitespace byte")
    return out, pos + 1


def _read_ppm(data: bytes):
    (magic, w, h, maxval), off = _ppm_tokens(data)
    if magic != b"P6":
        raise ImageFormatError(f"unsupported PPM variant {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageFormatError("corrupt PPM header") from e
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError("corrupt PPM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    body = data[off : off + need]
    if len(body) < need:
        raise ImageFormatError("truncated PPM pixel data")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, 3).astype(np.float64) / maxval
    depth = 16 if maxval > 255 else 8
    return arr, depth


def _read_png(path):
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise ImageFormatError("PNG support needs Pillow") from e
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise ImageFormatError(f"unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr, 8


def center_crop8(arr: np.ndarray) -> np.ndarray:
    """Center-crop each side down to a multiple of 8 (sides under 8 are kept)."""
    h, w = arr.shape[:2]
    nh = h - h % 8 if h >= 8 else h
    nw = w - w % 8 if w >= 8 else w
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return arr[y0 : y0 + nh, x0 : x0 + nw]


def load_image(path) -> ImageRecord:
    path = os.fspath(path)
    with open(path, "rb") as f:
        head = f.read(8)
        f.seek(0)
        if head.startswith(b"\x89PNG"):
            arr, depth = _read_png(path)
        elif head[:1] == b"P":
            arr, depth = _read_ppm(f.read())
        else:
            raise ImageFormatError(f"{path}: not a PPM or PNG file")
    arr = center_crop8(arr)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32))
    return ImageRecord(t.unsqueeze(0), path, depth)


def _quantized(x: torch.Tensor, maxval: int) -> np.ndarray:
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("save one image at a time")
        x = x[0]
    arr = x.detach().to(torch.float64).clamp(0, 1).numpy().transpose(1, 2, 0)
    return np.round(arr * maxval)


def save_image(x: torch.Tensor, path, bit_depth: int = 8):
    """Write an image; ``.png`` paths use Pillow (8-bit), anything else is P6.

    Perturbations of RMS 1e-3 are a quarter of an 8-bit level, so adversarial
    images should be stored with ``bit_depth=16``.
    """
    path = os.fspath(path)
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    if path.lower().endswith(".png"):
        if bit_depth != 8:
            raise ValueError("PNG output is 8-bit only; use a .ppm path")
        from PIL import Image

        Image.fromarray(_quantized(x, 255).astype(np.uint8), "RGB").save(path)
        return
    maxval = 255 if bit_depth == 8 else 65535
    arr = _quantized(x, maxval).astype(">u2" if bit_depth == 16 else "u1")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n%d\n" % (w, h, maxval))
        f.write(arr.tobytes())
