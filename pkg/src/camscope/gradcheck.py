"""Finite-difference checks of every tape primitive and a small U-Net."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, finite_difference_grad, relative_error
from .unet import UNetConfig, build_unet, forward, parameter_shapes

TOLERANCE = 1e-4
STEP = 1e-5

Builder = Callable[[List[Tensor]], Tensor]


def _fault_hook(op: str) -> Callable:
    def hook(name, grads):
        if name != op:
            return grads
        return tuple(None if g is None else 1.5 * g for g in grads)
    return hook


def check_builder(build: Builder, arrays: Sequence[np.ndarray], seed: int = 0,
                  h: float = STEP, fault: Optional[str] = None) -> float:
    """Max relative error of tape gradients vs central differences, over all inputs.

    Non-scalar outputs are reduced with a fixed random projection.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build([Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed + 7919).uniform(-1.0, 1.0, probe.shape)

    def run(arrs):
        tape = Tape()
        if fault:
            tape.grad_hook = _fault_hook(fault)
        ts = [tape.leaf(a) for a in arrs]
        y = build(ts)
        if y.size > 1:
            y = ad.sum_all(ad.mul(y, tape.leaf(proj)))
        return y, ts, tape

    y, ts, tape = run(arrays)
    grads = tape.backward(y, [t.node for t in ts])
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(xi, i=i):
            arrs = list(arrays)
            arrs[i] = xi
            return run(arrs)[0].item()
        numeric = finite_difference_grad(f, a.copy(), h)
        worst = max(worst, relative_error(grads[ts[i].node], numeric))
    return worst


def _primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)
    label = rng.integers(0, 3, (4, 5))
    mask = rng.random((4, 5)) < 0.5
    return {
        "add": (lambda t: ad.add(t[0], t[1]), [u(2, 3), u(2, 3)]),
        "mul": (lambda t: ad.mul(t[0], t[1]), [u(2, 3), u(2, 3)]),
        "scale": (lambda t: ad.scale(t[0], -1.7), [u(3, 4)]),
        "relu": (lambda t: ad.relu(t[0]), [u(1, 2, 4, 4)]),
        "sum": (lambda t: ad.sum_all(t[0]), [u(3, 3)]),
        "concat": (lambda t: ad.concat_channels(t), [u(1, 2, 3, 3), u(1, 1, 3, 3)]),
        "pixel_sum": (lambda t: ad.pixel_sum(t[0], 1, mask), [u(1, 3, 4, 5)]),
        "select": (lambda t: ad.select(t[0], (0, 2, 1, 1)), [u(1, 3, 2, 2)]),
        "softmax": (lambda t: ad.softmax_channels(t[0]), [u(1, 3, 2, 3)]),
        "gap": (lambda t: ad.global_avg_pool(t[0]), [u(1, 3, 3, 4)]),
        "linear": (lambda t: ad.linear(t[0], t[1], t[2]), [u(1, 4), u(3, 4), u(3)]),
        "reshape": (lambda t: ad.reshape(t[0], (2, 6)), [u(3, 4)]),
        "cross_entropy": (lambda t: ad.cross_entropy(t[0], label), [u(1, 3, 4, 5)]),
        "conv2d": (lambda t: ad.conv2d(t[0], t[1], t[2], padding=1), [u(1, 2, 5, 5), u(3, 2, 3, 3), u(3)]),
        "conv2d_stride2": (lambda t: ad.conv2d(t[0], t[1], t[2], padding=0, stride=2),
                           [u(2, 2, 6, 5), u(2, 2, 2, 3), u(2)]),
        "maxpool2d": (lambda t: ad.maxpool2d(t[0], 2), [u(1, 2, 4, 6)]),
        "upsample_nearest": (lambda t: ad.upsample_nearest(t[0], 2), [u(1, 2, 3, 3)]),
        "upsample_bilinear": (lambda t: ad.upsample_bilinear(t[0], 5, 7), [u(1, 2, 3, 4)]),
    }


def unet_case(seed: int = 0, size: int = 16):
    """Depth-2 U-Net on a size x size input; every parameter and the input are checked."""
    cfg = UNetConfig(depth=2, channels=(8, 4), in_channels=1, num_classes=3, seed=seed)
    model = build_unet(cfg)
    rng = np.random.default_rng(seed + 1)
    # non-zero biases so no unit sits exactly on a ReLU kink
    for name in model.params:
        if name.endswith(".bias"):
            model.params[name] = rng.uniform(-0.1, 0.1, model.params[name].shape)
    names = list(parameter_shapes(cfg))
    image = rng.uniform(-1.0, 1.0, (1, 1, size, size))
    return model, names, image


def check_unet(seed: int = 0, size: int = 16, h: float = STEP, fault: Optional[str] = None) -> float:
    """Gradients of a projected-logit scalar w.r.t. all parameters and the input."""

    model, names, image = unet_case(seed, size)
    base = {k: v.copy() for k, v in model.params.items()}
    probe, _, _ = forward(model, image)
    proj = np.random.default_rng(seed + 7919).uniform(-1.0, 1.0, probe.shape)

    def run(params, img):
        model.params = params
        logits, _, tape = forward(model, img)
        if fault:
            tape.grad_hook = _fault_hook(fault)
        y = ad.sum_all(ad.mul(logits, tape.leaf(proj)))
        return y, tape

    y, tape = run(base, image)
    wanted = {k: tape.leaves[k].node for k in names}
    wanted["input"] = tape.leaves["input"].node
    grads = tape.backward(y, wanted.values())

    worst = 0.0
    for k in names:
        def f(x, k=k):
            params = dict(base)
            params[k] = x
            return run(params, image)[0].item()
        numeric = finite_difference_grad(f, base[k].copy(), h)
        worst = max(worst, relative_error(grads[wanted[k]], numeric))
    numeric = finite_difference_grad(lambda x: run(base, x)[0].item(), image.copy(), h)
    worst = max(worst, relative_error(grads[wanted["input"]], numeric))
    model.params = base
    return worst


def run_gradcheck(seed: int = 0, fault: Optional[str] = None, include_unet: bool = True) -> Dict[str, float]:
    """Max relative error per primitive (plus ``unet``); ``fault`` corrupts one op's backward."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, (build, arrays) in _primitive_cases(rng).items():
        report[name] = check_builder(build, arrays, seed, fault=fault)
    if include_unet:
        report["unet"] = check_unet(seed, fault=fault)
    return report
