"""Command-line entry point: train, cam, gradcheck, demo.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error, 3 I/O error.
Any flag may also come from ``--config FILE`` (``key=value`` lines); flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import render
from .cam import (RELU_ORDERS, Method, PixelSetSpec, explain, resolve_pixel_set)
from .gradcheck import TOLERANCE, run_gradcheck
from .trainer import Sample, TrainConfig, synth_dataset, train, write_metrics_csv
from .unet import (ConfigError, UNetConfig, WeightFileError, build_unet, load_weights,
                   predict_classes, save_weights)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# CLI method names -> CAM methods
METHODS = {
    "seg_grad": Method.SEG_GRAD_CAM,
    "seg_hires_grad": Method.SEG_HIRES_GRAD_CAM,
    "seg_xres": Method.SEG_XRES_CAM,
}

log = logging.getLogger("camscope")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", EXIT_CONFIG)


@dataclass
class RunConfig:
    """A command plus its options; round-trips through ``key=value`` text."""

    command: str
    options: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, command: str, allowed: Sequence[str]) -> "RunConfig":
        opts = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise CliError(f"config line {n}: expected key=value")
            if key == "command":
                if value.strip() != command:
                    raise CliError(f"config is for command {value.strip()!r}, not {command!r}")
                continue
            if key not in allowed:
                raise CliError(f"config line {n}: unknown key {key!r}")
            opts[key] = value.strip()
        return cls(command, opts)

    def to_text(self) -> str:
        lines = [f"command={self.command}"] + [f"{k}={v}" for k, v in self.options.items()]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="camscope", description="U-Net class activation maps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a U-Net and write a weight file + metrics CSV")
    t.add_argument("--config")
    t.add_argument("--synthetic", help="n=<count>,classes=<k>,size=<px>")
    t.add_argument("--data-dir", help="directory of <stem>.pgm/.ppm + <stem>.label.pgm pairs")
    t.add_argument("--classes", type=int, help="class count for --data-dir (default: max label + 1)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--channels", default="64,32,16,8", help="per level, deepest first")
    t.add_argument("--out", help="weight file to write")
    t.add_argument("--metrics", help="metrics CSV (default: --out with .csv suffix)")

    c = sub.add_parser("cam", help="render CAM overlays for one image")
    c.add_argument("--config")
    c.add_argument("--model")
    c.add_argument("--image", help="binary PGM (P5) or PPM (P6)")
    c.add_argument("--out-dir")
    c.add_argument("--method", default="seg_hires_grad",
                   help=f"comma list of {', '.join(METHODS)} or 'all'")
    c.add_argument("--layer", "--layers", dest="layer", default=None,
                   help="capture name, comma list, or 'all' (default: bottleneck)")
    c.add_argument("--pixel-set", default="whole", help="whole|class:<c>|rect:x0,y0,x1,y1|point:i,j")
    c.add_argument("--class", dest="cls", type=int, default=None,
                   help="target class (default: the class of --pixel-set class:<c>, else 1)")
    c.add_argument("--relu-order", default=RELU_ORDERS[0], choices=RELU_ORDERS)
    c.add_argument("--xres-window", type=int, default=2)
    c.add_argument("--alpha", type=float, default=0.5)
    c.add_argument("--softmax", action="store_true", help="explain softmax scores, not logits")
    c.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    d = sub.add_parser("demo", help="synthetic end-to-end run with figure-style panels")
    d.add_argument("--config")
    d.add_argument("--out-dir", default="demo_out")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n", type=int, default=64)
    d.add_argument("--test-n", type=int, default=16)
    d.add_argument("--classes", type=int, default=3)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--epochs", type=int, default=30)
    d.add_argument("--lr", type=float, default=0.05)
    d.add_argument("--depth", type=int, default=4)
    d.add_argument("--channels", default="64,32,16,8")
    d.add_argument("--layer", default=None)
    d.add_argument("--skip-train", action="store_true")
    d.add_argument("--model")
    return p


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise CliError(parser.format_usage().strip())
    if getattr(args, "config", None):
        sp = _subparser(parser, args.command)
        dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO)
        rc = RunConfig.from_text(text, args.command, list(dests))
        defaults = {}
        for key, value in rc.options.items():
            action = dests[key]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise CliError(f"config key {key}: expected a boolean, got {value!r}")
                defaults[key] = value.lower() in ("true", "1", "yes")
            else:
                defaults[key] = value  # string defaults go through the action's type
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _parse_channels(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise CliError(f"--channels: expected comma-separated ints, got {text!r}")


def _parse_synthetic(text: str) -> Dict[str, int]:
    spec = {"n": 64, "classes": 3, "size": 64}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in spec:
            raise CliError(f"--synthetic: bad entry {part!r}; keys are n, classes, size")
        try:
            spec[key] = int(value)
        except ValueError:
            raise CliError(f"--synthetic: {key} must be an int")
    return spec


def load_data_dir(path: Path, num_classes: Optional[int]) -> tuple:
    """Image + label pairs: ``<stem>.pgm`` (or ``.ppm``) with ``<stem>.label.pgm``."""
    samples = []
    for img_path in sorted(path.iterdir()):
        if img_path.suffix not in (".pgm", ".ppm") or img_path.name.endswith(".label.pgm"):
            continue
        label_path = img_path.with_name(img_path.stem + ".label.pgm")
        if not label_path.exists():
            raise CliError(f"missing label file {label_path}", EXIT_IO)
        image = render.read_pgm_ppm(img_path)
        label = render.read_netpbm_bytes(label_path).astype(np.int64)
        if label.ndim != 2:
            raise CliError(f"{label_path}: labels must be a P5 file")
        samples.append(Sample(image, label))
    if not samples:
        raise CliError(f"no .pgm/.ppm images in {path}", EXIT_IO)
    k = num_classes or max(2, int(max(s.label.max() for s in samples)) + 1)
    if any(s.label.max() >= k for s in samples):
        raise CliError(f"label ids must be < {k}")
    return samples, k


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", EXIT_IO)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    if not args.out:
        raise CliError("train: --out is required")
    if bool(args.synthetic) == bool(args.data_dir):
        raise CliError("train: give exactly one of --synthetic or --data-dir")
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    channels = _parse_channels(args.channels)
    try:
        tcfg = TrainConfig(args.lr, args.epochs, args.seed)
    except ValueError as exc:
        raise CliError(f"train: {exc}")

    if args.synthetic:
        spec = _parse_synthetic(args.synthetic)
        try:
            data = synth_dataset(spec["n"], spec["classes"], spec["size"], spec["size"], seed=args.seed)
        except ValueError as exc:
            raise CliError(f"train: {exc}")
        num_classes, in_ch = spec["classes"], 1
    else:
        d = Path(args.data_dir)
        if not d.is_dir():
            raise CliError(f"train: --data-dir {d} is not a directory", EXIT_IO)
        data, num_classes = load_data_dir(d, args.classes)
        in_ch = data[0].image.shape[1]
    try:
        model = build_unet(UNetConfig(args.depth, channels, in_ch, num_classes, args.seed))
    except ConfigError as exc:
        raise CliError(f"train: {exc}")
    _ensure_dir(out.parent)
    _ensure_dir(metrics.parent)

    model, history = train(model, data, tcfg, progress=True)
    save_weights(model, out)
    write_metrics_csv(history, metrics)
    last = history[-1]
    print(f"wrote {out} and {metrics}; final loss {last.loss:.6f} f1 {last.f1:.6f} iou {last.iou:.6f}")
    return EXIT_OK


def _resolve_methods(text: str) -> List[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    if "all" in names:
        return list(METHODS)
    bad = [n for n in names if n not in METHODS]
    if bad or not names:
        raise CliError(f"unknown method {bad[0] if bad else text!r}; valid: {', '.join(METHODS)}, all")
    return names


def cmd_cam(args: argparse.Namespace) -> int:
    for flag in ("model", "image", "out_dir"):
        if not getattr(args, flag):
            raise CliError(f"cam: --{flag.replace('_', '-')} is required")
    methods = _resolve_methods(args.method)
    try:
        pixel_spec = PixelSetSpec.parse(args.pixel_set)
    except ValueError as exc:
        raise CliError(f"cam: {exc}")
    if not 0.0 <= args.alpha <= 1.0:
        raise CliError("cam: --alpha must lie in [0, 1]")
    if args.xres_window < 1:
        raise CliError("cam: --xres-window must be >= 1")
    for p in (args.model, args.image):
        if not Path(p).is_file():
            raise CliError(f"cam: no such file {p}", EXIT_IO)

    model = load_weights(args.model)
    image = render.read_pgm_ppm(args.image)
    valid = model.capture_names
    if args.layer in (None, ""):
        layers = [model.default_layer]
    elif args.layer == "all":
        layers = valid
    else:
        layers = [s.strip() for s in args.layer.split(",")]
        bad = [n for n in layers if n not in valid]
        if bad:
            raise CliError(f"unknown layer {bad[0]!r}; valid: {', '.join(valid)}, all")
    cls = args.cls if args.cls is not None else (pixel_spec.cls if pixel_spec.cls is not None else 1)
    if not 0 <= cls < model.num_classes:
        raise CliError(f"cam: --class {cls} outside [0, {model.num_classes})")
    if image.shape[1] != model.config.in_channels:
        raise CliError(f"cam: image has {image.shape[1]} channels, model expects "
                       f"{model.config.in_channels}")
    divisor = model.config.divisor
    if image.shape[2] % divisor or image.shape[3] % divisor:
        raise CliError(f"cam: image {image.shape[2]}x{image.shape[3]} must be divisible by {divisor}")

    out = Path(args.out_dir)
    _ensure_dir(out)
    logits, _, _ = model.forward(image)
    pred = predict_classes(logits)
    try:
        pixels = resolve_pixel_set(pixel_spec, pred)
    except ValueError as exc:
        raise CliError(f"cam: {exc}")
    base = render.tensor_to_rgb(image)
    render.write_ppm(render.colorize_labels(pred), out / "prediction.ppm")
    render.write_ppm(render.mask_image(pixels.mask, base), out / "pixelset.ppm")
    written = ["prediction.ppm", "pixelset.ppm"]

    cam_methods = [METHODS[m] for m in methods]

    def one_layer(layer: str):
        try:
            return layer, explain(model, image, cls, pixels, cam_methods, layer, args.relu_order,
                                  args.xres_window, args.softmax)
        except ValueError as exc:
            raise CliError(f"cam: layer {layer}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one_layer, layers))
    for layer, maps in results:
        for short, method in zip(methods, cam_methods):
            hm = maps[method.value]
            heat = render.apply_colormap(render.normalize_heatmap(hm.post_relu))
            name = f"{short}_{layer}_c{cls}.ppm"
            render.write_ppm(render.overlay(base, heat, args.alpha), out / name)
            written.append(name)
    print("\n".join(str(out / w) for w in written))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(args.seed, fault=args.inject_fault)
    ok = True
    for name, err in report.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<18} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    print("all checks passed" if ok else f"gradient check FAILED (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_demo(args: argparse.Namespace) -> int:
    from .demo import DemoConfig, run_demo

    if args.skip_train and not args.model:
        raise CliError("demo: --skip-train needs --model")
    if args.model and not Path(args.model).is_file():
        raise CliError(f"demo: no such file {args.model}", EXIT_IO)
    cfg = DemoConfig(out_dir=args.out_dir, seed=args.seed, n_train=args.n, n_test=args.test_n,
                     num_classes=args.classes, size=args.size, epochs=args.epochs, lr=args.lr,
                     depth=args.depth, channels=_parse_channels(args.channels), layer=args.layer,
                     model_path=args.model if args.skip_train else None)
    _ensure_dir(Path(cfg.out_dir))
    start = time.perf_counter()
    res = run_demo(cfg)
    print(f"test f1 {res.test_f1:.4f} iou {res.test_iou:.4f}")
    for c, rate in res.win_rate.items():
        print(f"class {c}: Seg-HiRes-Grad CAM more localized on {rate:.0%} of test images "
              f"(mean mass fraction {res.mean_fraction['seg_grad_cam'][c]:.3f} -> "
              f"{res.mean_fraction['seg_hires_grad_cam'][c]:.3f})")
    print(f"wrote {len(res.files)} files to {cfg.out_dir} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "cam": cmd_cam, "gradcheck": cmd_gradcheck, "demo": cmd_demo}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, WeightFileError, render.ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
