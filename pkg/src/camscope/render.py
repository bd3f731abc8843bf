"""Heatmap colouring, overlays and binary PGM/PPM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor

# (position, (r, g, b)) anchors of the jet-like palette
JET_ANCHORS = (
    (0.0, (0, 0, 131)),
    (0.125, (0, 60, 170)),
    (0.375, (5, 255, 255)),
    (0.625, (255, 255, 0)),
    (0.875, (250, 0, 0)),
    (1.0, (128, 0, 0)),
)

# label-map colours for class ids 0..7
LABEL_PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (0, 130, 200),
    (255, 225, 25), (245, 130, 48), (145, 30, 180), (70, 240, 240),
], dtype=np.uint8)


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class RgbImage:
    pixels: np.ndarray  # uint8, height x width x 3

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def from_gray(cls, gray: np.ndarray) -> "RgbImage":
        """[0, 1] grayscale map to RGB."""
        g = round_half_up(np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0) * 255.0)
        return cls(np.repeat(g[..., None], 3, axis=2))


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.uint8)


def normalize_heatmap(h, mode: str = "minmax") -> np.ndarray:
    """Map a heatmap (or raw 2-D array) into [0, 1]; constant maps become 0.5."""
    m = np.asarray(getattr(h, "post_relu", h), dtype=np.float64)
    if mode == "none":
        return np.clip(m, 0.0, 1.0)
    if mode != "minmax":
        raise ValueError(f"unknown normalization {mode!r}")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 0.5)
    return (m - lo) / (hi - lo)


def apply_colormap(map01: np.ndarray, palette: str = "jet") -> RgbImage:
    if palette != "jet":
        raise ValueError(f"unknown palette {palette!r}")
    v = np.asarray(map01, dtype=np.float64)
    if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("colormap input must lie in [0, 1]")
    xs = np.array([a[0] for a in JET_ANCHORS])
    rgb = np.stack([np.interp(v, xs, [a[1][ch] for a in JET_ANCHORS]) for ch in range(3)], axis=-1)
    return RgbImage(round_half_up(rgb))


def overlay(base: RgbImage, heat: RgbImage, alpha: float = 0.5) -> RgbImage:
    if base.pixels.shape != heat.pixels.shape:
        raise ValueError(f"extent mismatch: {base.pixels.shape[:2]} vs {heat.pixels.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mixed = (1.0 - alpha) * base.pixels.astype(np.float64) + alpha * heat.pixels.astype(np.float64)
    return RgbImage(round_half_up(np.clip(mixed, 0.0, 255.0)))


def colorize_labels(label: np.ndarray) -> RgbImage:
    return RgbImage(LABEL_PALETTE[np.asarray(label) % len(LABEL_PALETTE)])


def mask_image(mask: np.ndarray, base: RgbImage, color=(255, 255, 255)) -> RgbImage:
    """Base image dimmed outside ``mask``, solid colour inside."""
    px = (base.pixels.astype(np.float64) * 0.35).astype(np.uint8)
    px[np.asarray(mask, dtype=bool)] = color
    return RgbImage(px)


def hstack(images: Sequence[RgbImage], gap: int = 2) -> RgbImage:
    h = max(im.height for im in images)
    parts = []
    for k, im in enumerate(images):
        if k:
            parts.append(np.full((h, gap, 3), 255, dtype=np.uint8))
        pad = np.zeros((h, im.width, 3), dtype=np.uint8)
        pad[:im.height] = im.pixels
        parts.append(pad)
    return RgbImage(np.concatenate(parts, axis=1))


def vstack(images: Sequence[RgbImage], gap: int = 2) -> RgbImage:
    w = max(im.width for im in images)
    parts = []
    for k, im in enumerate(images):
        if k:
            parts.append(np.full((gap, w, 3), 255, dtype=np.uint8))
        pad = np.zeros((im.height, w, 3), dtype=np.uint8)
        pad[:, :im.width] = im.pixels
        parts.append(pad)
    return RgbImage(np.concatenate(parts, axis=0))


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

def _parse_header(buf: bytes) -> Tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if len(buf) < 2:
        raise ImageFormatError("truncated header", len(buf))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            if pos >= len(buf):
                raise ImageFormatError("truncated header", pos)
            raise ImageFormatError(f"expected a decimal number, found {buf[pos:pos + 1]!r}", pos)
        fields.append((int(buf[start:pos]), start))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte", pos)
    (w, w_at), (h, h_at), (maxval, mv_at) = fields
    if w < 1:
        raise ImageFormatError("width must be >= 1", w_at)
    if h < 1:
        raise ImageFormatError("height must be >= 1", h_at)
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported, need 255", mv_at)
    return magic, w, h, maxval, pos + 1


def read_netpbm_bytes(path: Union[str, Path]) -> np.ndarray:
    """Raw uint8 pixels: H x W for P5, H x W x 3 for P6."""
    buf = Path(path).read_bytes()
    magic, w, h, _, off = _parse_header(buf)
    depth = 1 if magic == b"P5" else 3
    need = w * h * depth
    if len(buf) - off < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes, have {len(buf) - off}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return px.reshape((h, w) if depth == 1 else (h, w, 3)).copy()


def read_pgm_ppm(path: Union[str, Path]) -> Tensor:
    """Binary P5/P6 file as a [1, C, H, W] tensor scaled to [0, 1]."""
    px = read_netpbm_bytes(path).astype(np.float64) / 255.0
    if px.ndim == 2:
        return Tensor(px[None, None])
    return Tensor(px.transpose(2, 0, 1)[None])


def write_ppm(img: RgbImage, path: Union[str, Path]) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def write_pgm(gray: np.ndarray, path: Union[str, Path]) -> None:
    """uint8 H x W array as a binary P5 file (label maps, grayscale images)."""
    px = np.asarray(gray)
    if px.ndim != 2:
        raise ValueError("write_pgm needs a 2-D array")
    if px.min() < 0 or px.max() > 255:
        raise ValueError("pgm values must lie in [0, 255]")
    header = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + px.astype(np.uint8).tobytes())


def tensor_to_rgb(image: Tensor) -> RgbImage:
    """[1, C, H, W] image in [0, 1] (C = 1 or 3) to RGB."""
    d = image.data[0]
    if d.shape[0] == 1:
        return RgbImage.from_gray(d[0])
    return RgbImage(round_half_up(np.clip(d[:3].transpose(1, 2, 0), 0.0, 1.0) * 255.0))
