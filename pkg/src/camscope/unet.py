"""Encoder-decoder U-Net on the tape, with named activation capture points."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor

MAGIC = b"CAMSCOPE"
FORMAT_VERSION = 1

# Desk-scale default; the full-size configuration uses [512, 256, 128, 64].
DEFAULT_CHANNELS = (64, 32, 16, 8)
WIDE_CHANNELS = (512, 256, 128, 64)


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    channels: Tuple[int, ...] = DEFAULT_CHANNELS  # deepest level first
    in_channels: int = 1
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError("must be >= 2", "depth")
        if len(self.channels) != self.depth:
            raise ConfigError(f"needs {self.depth} entries, got {len(self.channels)}", "channels")
        if any(c < 1 for c in self.channels):
            raise ConfigError("all entries must be >= 1", "channels")
        if self.in_channels < 1:
            raise ConfigError("must be >= 1", "in_channels")
        if self.num_classes < 2:
            raise ConfigError("must be >= 2", "num_classes")
        if not 0 <= self.seed < 2**32:
            raise ConfigError("must be an unsigned 32-bit int", "seed")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class CapturePoint:
    name: str
    tensor: Tensor
    node: int


def parameter_shapes(config: UNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map; the order is also the init and file order."""
    ch = list(config.channels)[::-1]  # top level first
    shapes: Dict[str, Tuple[int, ...]] = {}

    def conv(name: str, cin: int, cout: int, k: int = 3) -> None:
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for lvl in range(config.depth - 1):
        conv(f"enc{lvl + 1}.conv1", cin, ch[lvl])
        conv(f"enc{lvl + 1}.conv2", ch[lvl], ch[lvl])
        cin = ch[lvl]
    conv("bottleneck.conv1", cin, ch[-1])
    conv("bottleneck.conv2", ch[-1], ch[-1])
    for lvl in range(config.depth - 2, -1, -1):
        conv(f"dec{lvl + 1}.up", ch[lvl + 1], ch[lvl])
        conv(f"dec{lvl + 1}.conv1", 2 * ch[lvl], ch[lvl])
        conv(f"dec{lvl + 1}.conv2", ch[lvl], ch[lvl])
    conv("head", ch[0], config.num_classes, k=1)
    return shapes


@dataclass
class UNetModel:
    config: UNetConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def capture_names(self) -> List[str]:
        d = self.config.depth
        return ([f"enc{i}.post" for i in range(1, d)] + ["bottleneck"]
                + [f"dec{i}.post" for i in range(d - 1, 0, -1)])

    @property
    def default_layer(self) -> str:
        return "bottleneck"

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, image):
        return forward(self, image)


def build_unet(config: UNetConfig) -> UNetModel:
    """He-normal kernels (std = sqrt(2 / fan_in)), zero biases, seeded."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            params[name] = np.zeros(shape)
    return UNetModel(config, params)


def _as_image(image: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None, None]
    elif data.ndim == 3:
        data = data[None]
    return data


def forward(model: UNetModel, image: Union[Tensor, np.ndarray]) -> Tuple[Tensor, List[CapturePoint], Tape]:
    """Run the network on a fresh tape.

    Returns pre-softmax logits at input resolution, one capture per
    encoder/decoder level (post-convolution, pre-pooling) and the tape.
    Parameter leaves are registered on ``tape.leaves`` under their names.
    """
    cfg = model.config
    data = _as_image(image)
    if data.shape[0] != 1:
        raise ShapeError(f"batch size must be 1, got {data.shape[0]}", "batch")
    if data.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {data.shape[1]}", "channels")
    h, w = data.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(
            f"input {h}x{w} must be divisible by {cfg.divisor} (2^(depth-1)) in both extents",
            "height" if h % cfg.divisor else "width")

    tape = Tape()
    x = tape.leaf(data, name="input")
    p = {name: tape.leaf(arr, name=name) for name, arr in model.params.items()}
    captures: List[CapturePoint] = []

    def block(t: Tensor, name: str) -> Tensor:
        t = ad.relu(ad.conv2d(t, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1))
        return ad.relu(ad.conv2d(t, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1))

    def capture(t: Tensor, name: str) -> None:
        captures.append(CapturePoint(name, t, t.node))

    skips = []
    for lvl in range(1, cfg.depth):
        x = block(x, f"enc{lvl}")
        capture(x, f"enc{lvl}.post")
        skips.append(x)
        x = ad.maxpool2d(x, 2)
    x = block(x, "bottleneck")
    capture(x, "bottleneck")
    for lvl in range(cfg.depth - 1, 0, -1):
        name = f"dec{lvl}"
        x = ad.upsample_nearest(x, 2)
        x = ad.relu(ad.conv2d(x, p[f"{name}.up.weight"], p[f"{name}.up.bias"], padding=1))
        x = ad.concat_channels([skips[lvl - 1], x])
        x = block(x, name)
        capture(x, f"{name}.post")
    logits = ad.conv2d(x, p["head.weight"], p["head.bias"], padding=0)
    return logits, captures, tape


def predict_classes(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lower class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 4:
        data = data[0]
    return np.argmax(data, axis=0)


# ---------------------------------------------------------------------------
# Weight file
# ---------------------------------------------------------------------------

def _config_bytes(cfg: UNetConfig) -> bytes:
    return struct.pack(f"<I{cfg.depth}IIII", cfg.depth, *cfg.channels,
                       cfg.in_channels, cfg.num_classes, cfg.seed)


def save_weights(model: UNetModel, path: Union[str, Path]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION)
    out += _config_bytes(model.config)
    out += struct.pack("<I", len(model.params))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(f"truncated file: need {n} bytes at offset {self.pos}, "
                                  f"have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: Union[str, Path], config: Optional[UNetConfig] = None) -> UNetModel:
    """Read a weight file; if ``config`` is given, shapes must match it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise WeightFileError("bad magic")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    (depth,) = r.unpack("<I")
    if depth > 64:
        raise WeightFileError(f"implausible depth {depth}")
    channels = r.unpack(f"<{depth}I")
    in_ch, n_cls, seed = r.unpack("<III")
    try:
        embedded = UNetConfig(depth, channels, in_ch, n_cls, seed)
    except ConfigError as exc:
        raise WeightFileError(f"invalid embedded config: {exc}") from exc
    expected = parameter_shapes(config if config is not None else embedded)

    (count,) = r.unpack("<I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name not in expected:
            raise WeightFileError(f"shape mismatch: unexpected parameter {name!r}")
        if tuple(shape) != expected[name]:
            raise WeightFileError(f"shape mismatch for {name}: file {tuple(shape)}, "
                                  f"config {expected[name]}")
        params[name] = arr
    missing = [k for k in expected if k not in params]
    if missing:
        raise WeightFileError(f"shape mismatch: missing parameters {missing[:3]}")
    if r.pos != len(r.buf):
        raise WeightFileError(f"trailing bytes after offset {r.pos}")
    if not all(np.isfinite(a).all() for a in params.values()):
        raise WeightFileError("non-finite parameter values")
    return UNetModel(config if config is not None else embedded,
                     {k: params[k] for k in expected})
