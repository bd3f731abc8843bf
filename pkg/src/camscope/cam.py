"""Gradient-weighted class activation maps for segmentation and classification.

The segmentation target is the sum of one class's logits over a pixel set M.
Its gradient at a capture layer is either averaged per channel (Seg-Grad CAM)
or used as a full-resolution elementwise weight (Seg-HiRes-Grad CAM), then
multiplied into the activations, summed over channels and upscaled.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bilinear_matrix
from .unet import CapturePoint, predict_classes

RELU_THEN_UPSAMPLE = "relu_then_upsample"
UPSAMPLE_THEN_RELU = "upsample_then_relu"
RELU_ORDERS = (RELU_THEN_UPSAMPLE, UPSAMPLE_THEN_RELU)

# min(h, w) at or below this triggers the resolution-collapse warning
COLLAPSE_EXTENT = 2


class Method(str, enum.Enum):
    CAM_FC = "cam_fc"
    GRAD_CAM = "grad_cam"
    HIRES_CAM = "hires_cam"
    SEG_GRAD_CAM = "seg_grad_cam"
    SEG_HIRES_GRAD_CAM = "seg_hires_grad_cam"
    SEG_XRES_CAM = "seg_xres_cam"


SEG_METHODS = (Method.SEG_GRAD_CAM, Method.SEG_HIRES_GRAD_CAM, Method.SEG_XRES_CAM)


class ResolutionCollapseWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Pixel sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PixelSetSpec:
    """Unresolved pixel-set description; rect bounds are inclusive (x = column)."""

    kind: str = "whole_image"
    cls: Optional[int] = None
    rect: Optional[Tuple[int, int, int, int]] = None
    points: Tuple[Tuple[int, int], ...] = ()

    @classmethod
    def parse(cls, text: str) -> "PixelSetSpec":
        """Parse ``whole``, ``class:<c>``, ``rect:x0,y0,x1,y1`` or ``point:i,j[;i,j...]``."""
        text = text.strip()
        try:
            if text in ("whole", "whole_image", "image"):
                return cls("whole_image")
            kind, _, arg = text.partition(":")
            if kind == "class":
                return cls("predicted_class", cls=int(arg))
            if kind == "rect":
                x0, y0, x1, y1 = (int(v) for v in arg.split(","))
                return cls("rect", rect=(x0, y0, x1, y1))
            if kind in ("point", "points"):
                pts = tuple(tuple(int(v) for v in p.split(",")) for p in arg.split(";"))
                if any(len(p) != 2 for p in pts):
                    raise ValueError
                return cls("points", points=pts)
        except ValueError:
            pass
        raise ValueError(f"bad pixel set {text!r}; expected whole|class:<c>|rect:x0,y0,x1,y1|point:i,j")


@dataclass
class PixelSet:
    kind: str
    mask: np.ndarray  # bool H x W at output resolution

    @property
    def indices(self) -> List[Tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.mask))]

    def __len__(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_indices(cls, indices: Iterable[Tuple[int, int]], height: int, width: int,
                     kind: str = "points") -> "PixelSet":
        mask = np.zeros((height, width), dtype=bool)
        for i, j in indices:
            if not (0 <= i < height and 0 <= j < width):
                raise ValueError(f"pixel ({i}, {j}) outside {height}x{width}")
            mask[i, j] = True
        return cls(kind, mask)


def resolve_pixel_set(spec: PixelSetSpec, prediction: np.ndarray) -> PixelSet:
    h, w = prediction.shape
    if spec.kind == "whole_image":
        return PixelSet(spec.kind, np.ones((h, w), dtype=bool))
    if spec.kind == "predicted_class":
        return PixelSet(spec.kind, prediction == spec.cls)
    if spec.kind == "rect":
        x0, y0, x1, y1 = spec.rect
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise ValueError(f"rect {spec.rect} outside {w}x{h} image")
        mask = np.zeros((h, w), dtype=bool)
        mask[y0:y1 + 1, x0:x1 + 1] = True
        return PixelSet(spec.kind, mask)
    if spec.kind == "points":
        return PixelSet.from_indices(spec.points, h, w)
    raise ValueError(f"unknown pixel set kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def target_scalar(logits: Tensor, c: int, pixels: PixelSet) -> Tensor:
    """Sum of class-``c`` scores over the pixel set, recorded on the tape."""
    return ad.pixel_sum(logits, c, pixels.mask)


def grad_cam_weights(grad: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a (K, h, w) gradient."""
    grad = np.asarray(grad.data if isinstance(grad, Tensor) else grad)
    return grad.mean(axis=(1, 2))


def hires_weights(grad: np.ndarray) -> np.ndarray:
    """The raw gradient map, used elementwise."""
    grad = np.asarray(grad.data if isinstance(grad, Tensor) else grad)
    return grad.copy()


def pool_gradients(grad: np.ndarray, window: int) -> np.ndarray:
    """Block max-pool each channel with ``window`` then nearest-upsample back.

    Edge blocks of extents not divisible by ``window`` are partial windows.
    """
    k, h, w = grad.shape
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds feature map {h}x{w}")
    if window == 1:
        return grad.copy()
    hb, wb = -(-h // window), -(-w // window)
    padded = np.full((k, hb * window, wb * window), -np.inf)
    padded[:, :h, :w] = grad
    pooled = padded.reshape(k, hb, window, wb, window).max(axis=(2, 4))
    up = np.repeat(np.repeat(pooled, window, axis=1), window, axis=2)
    return up[:, :h, :w]


def upsample_map(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = m.shape
    if out_h < h or out_w < w:
        raise ValueError(f"cannot downscale {h}x{w} to {out_h}x{out_w}")
    return bilinear_matrix(h, out_h) @ m @ bilinear_matrix(w, out_w).T


@dataclass
class Heatmap:
    pre_relu: np.ndarray
    post_relu: np.ndarray
    method: str = ""
    layer: str = ""
    cls: Optional[int] = None
    warning: Optional[str] = None


def assemble_heatmap(weights: np.ndarray, activations: np.ndarray, mode: str,
                     out_h: int, out_w: int, relu_order: str = RELU_THEN_UPSAMPLE) -> Heatmap:
    """Weighted channel sum, then ReLU and bilinear upscale in ``relu_order``.

    ``mode`` is ``"scalar_weights"`` (weights: K) or ``"map_weights"``
    (weights: K x h x w, multiplied elementwise).
    """
    a = np.asarray(activations.data if isinstance(activations, Tensor) else activations)
    if a.ndim == 4:
        a = a[0]
    weights = np.asarray(weights)
    if mode == "scalar_weights":
        if weights.shape != (a.shape[0],):
            raise ValueError(f"scalar weights need shape ({a.shape[0]},), got {weights.shape}")
        s = np.tensordot(weights, a, axes=1)
    elif mode == "map_weights":
        if weights.shape != a.shape:
            raise ValueError(f"map weights need shape {a.shape}, got {weights.shape}")
        s = (weights * a).sum(axis=0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if relu_order == RELU_THEN_UPSAMPLE:
        pre = upsample_map(s, out_h, out_w)
        post = upsample_map(np.maximum(s, 0.0), out_h, out_w)
    elif relu_order == UPSAMPLE_THEN_RELU:
        pre = upsample_map(s, out_h, out_w)
        post = np.maximum(pre, 0.0)
    else:
        raise ValueError(f"unknown relu order {relu_order!r}")
    return Heatmap(pre, post)


def check_resolution_collapse(capture: CapturePoint) -> Optional[ResolutionCollapseWarning]:
    h, w = capture.tensor.shape[-2:]
    if min(h, w) <= COLLAPSE_EXTENT:
        return ResolutionCollapseWarning(
            f"layer {capture.name!r} is only {h}x{w}: too little spatial detail for a "
            f"meaningful heatmap; use a larger input or a shallower layer")
    return None


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

@dataclass
class CamRequest:
    method: Method = Method.SEG_HIRES_GRAD_CAM
    cls: int = 1
    layer: Optional[str] = None  # default: the model's deepest layer
    pixel_set: PixelSetSpec = field(default_factory=PixelSetSpec)
    xres_window: int = 2
    relu_order: str = RELU_THEN_UPSAMPLE
    use_softmax: bool = False  # target post-softmax scores instead of logits

    def __post_init__(self):
        self.method = Method(self.method)
        if self.xres_window < 1:
            raise ValueError("xres_window must be >= 1")
        if self.relu_order not in RELU_ORDERS:
            raise ValueError(f"relu_order must be one of {RELU_ORDERS}")


@dataclass
class LayerGradient:
    """Everything one backward pass yields for a (class, pixel set, layer) choice."""

    capture: CapturePoint
    activation: np.ndarray  # K x h x w
    grad: np.ndarray  # K x h x w
    prediction: np.ndarray
    pixels: PixelSet
    out_shape: Tuple[int, int]
    warning: Optional[ResolutionCollapseWarning] = None


def _find_capture(model, captures: Sequence[CapturePoint], layer: Optional[str]) -> CapturePoint:
    name = layer or model.default_layer
    for cap in captures:
        if cap.name == name:
            return cap
    raise KeyError(f"unknown layer {name!r}; valid: {', '.join(c.name for c in captures)}")


def _check_class(model, c: int) -> None:
    if not 0 <= c < model.num_classes:
        raise ValueError(f"class {c} outside [0, {model.num_classes})")


def _emit(warning: Optional[ResolutionCollapseWarning]) -> None:
    if warning is not None:
        warnings.warn(warning, stacklevel=3)


def layer_gradient(model, image, c: int, pixel_set: Union[PixelSetSpec, PixelSet, None] = None,
                   layer: Optional[str] = None, use_softmax: bool = False) -> LayerGradient:
    """Forward, build the pixel-set target and backpropagate to ``layer``."""
    _check_class(model, c)
    logits, captures, tape = model.forward(image)
    cap = _find_capture(model, captures, layer)
    prediction = predict_classes(logits)
    if pixel_set is None:
        pixel_set = PixelSetSpec()
    pixels = pixel_set if isinstance(pixel_set, PixelSet) else resolve_pixel_set(pixel_set, prediction)
    if pixels.mask.shape != prediction.shape:
        raise ValueError(f"pixel set {pixels.mask.shape} vs output {prediction.shape}")
    scores = ad.softmax_channels(logits) if use_softmax else logits
    y = target_scalar(scores, c, pixels)
    grad = tape.backward(y, [cap.node])[cap.node].data[0]
    return LayerGradient(cap, cap.tensor.data[0], grad, prediction, pixels,
                         tuple(tape.leaves["input"].shape[2:]), check_resolution_collapse(cap))


def heatmap_from_gradient(lg: LayerGradient, method: Method, relu_order: str = RELU_THEN_UPSAMPLE,
                          xres_window: int = 2) -> Heatmap:
    method = Method(method)
    if method in (Method.SEG_GRAD_CAM, Method.GRAD_CAM):
        hm = assemble_heatmap(grad_cam_weights(lg.grad), lg.activation, "scalar_weights",
                              *lg.out_shape, relu_order)
    elif method in (Method.SEG_HIRES_GRAD_CAM, Method.HIRES_CAM):
        hm = assemble_heatmap(hires_weights(lg.grad), lg.activation, "map_weights",
                              *lg.out_shape, relu_order)
    elif method == Method.SEG_XRES_CAM:
        # a window wider than a collapsed map pools the whole map
        window = min(xres_window, *lg.grad.shape[1:])
        hm = assemble_heatmap(pool_gradients(lg.grad, window), lg.activation, "map_weights",
                              *lg.out_shape, relu_order)
    else:
        raise ValueError(f"{method.value} is not a gradient method")
    hm.method = method.value
    hm.layer = lg.capture.name
    hm.warning = str(lg.warning) if lg.warning else None
    return hm


def explain(model, image, c: int, pixel_set: Union[PixelSetSpec, PixelSet, None] = None,
            methods: Sequence[Method] = SEG_METHODS, layer: Optional[str] = None,
            relu_order: str = RELU_THEN_UPSAMPLE, xres_window: int = 2,
            use_softmax: bool = False) -> Dict[str, Heatmap]:
    """Several segmentation CAMs from a single backward pass, keyed by method name."""
    lg = layer_gradient(model, image, c, pixel_set, layer, use_softmax)
    _emit(lg.warning)
    out = {}
    for m in methods:
        hm = heatmap_from_gradient(lg, m, relu_order, xres_window)
        hm.cls = c
        out[Method(m).value] = hm
    return out


def _seg(model, image, request: CamRequest, expected: Method) -> Heatmap:
    if request.method != expected:
        raise ValueError(f"request method {request.method.value} != {expected.value}")
    return explain(model, image, request.cls, request.pixel_set, [expected], request.layer,
                   request.relu_order, request.xres_window, request.use_softmax)[expected.value]


def seg_grad_cam(model, image, request: CamRequest) -> Heatmap:
    return _seg(model, image, request, Method.SEG_GRAD_CAM)


def seg_hires_grad_cam(model, image, request: CamRequest) -> Heatmap:
    return _seg(model, image, request, Method.SEG_HIRES_GRAD_CAM)


def seg_xres_cam(model, image, request: CamRequest) -> Heatmap:
    return _seg(model, image, request, Method.SEG_XRES_CAM)


def _classification_gradient(model, image, c: int, layer: Optional[str]) -> LayerGradient:
    _check_class(model, c)
    logits, captures, tape = model.forward(image)
    if logits.shape[2:] != (1, 1):
        raise ValueError(f"classification CAM needs a 1x1 output head, got {logits.shape[2:]}")
    cap = _find_capture(model, captures, layer)
    y = ad.select(logits, (0, c, 0, 0))
    grad = tape.backward(y, [cap.node])[cap.node].data[0]
    pred = predict_classes(logits)
    return LayerGradient(cap, cap.tensor.data[0], grad, pred, PixelSet("whole_image", np.ones((1, 1), bool)),
                         tuple(tape.leaves["input"].shape[2:]), check_resolution_collapse(cap))


def grad_cam(model, image, c: int, layer: Optional[str] = None,
             relu_order: str = RELU_THEN_UPSAMPLE) -> Heatmap:
    """Classification Grad CAM: the class logit itself is the target."""
    lg = _classification_gradient(model, image, c, layer)
    _emit(lg.warning)
    hm = heatmap_from_gradient(lg, Method.GRAD_CAM, relu_order)
    hm.cls = c
    return hm


def hires_cam(model, image, c: int, layer: Optional[str] = None,
              relu_order: str = RELU_THEN_UPSAMPLE) -> Heatmap:
    lg = _classification_gradient(model, image, c, layer)
    _emit(lg.warning)
    hm = heatmap_from_gradient(lg, Method.HIRES_CAM, relu_order)
    hm.cls = c
    return hm


def cam_fc(model, image, c: int, relu_order: str = RELU_THEN_UPSAMPLE) -> Heatmap:
    """Classic CAM: channel weights read straight from the FC layer of a GAP+FC head."""
    fc = getattr(model, "fc_weight", None)
    if fc is None:
        raise ValueError("cam_fc needs a model ending in global-average-pool + fully-connected head")
    _check_class(model, c)
    logits, captures, tape = model.forward(image)
    cap = _find_capture(model, captures, None)
    warning = check_resolution_collapse(cap)
    _emit(warning)
    hm = assemble_heatmap(fc[c], cap.tensor.data[0], "scalar_weights",
                          *tape.leaves["input"].shape[2:], relu_order)
    hm.method, hm.layer, hm.cls = Method.CAM_FC.value, cap.name, c
    hm.warning = str(warning) if warning else None
    return hm


def compute_cam(model, image, request: CamRequest) -> Heatmap:
    """Dispatch a request to the matching pipeline."""
    m = request.method
    if m == Method.CAM_FC:
        return cam_fc(model, image, request.cls, request.relu_order)
    if m == Method.GRAD_CAM:
        return grad_cam(model, image, request.cls, request.layer, request.relu_order)
    if m == Method.HIRES_CAM:
        return hires_cam(model, image, request.cls, request.layer, request.relu_order)
    return _seg(model, image, request, m)
