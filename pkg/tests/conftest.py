import time
from pathlib import Path

import numpy as np
import pytest

from camscope.cli import main
from camscope.unet import UNetConfig, build_unet, load_weights

ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'} {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    """Depth-2 U-Net, cheap enough for many forward/backward passes."""
    model = build_unet(UNetConfig(depth=2, channels=(8, 4), in_channels=1, num_classes=3, seed=3))
    r = np.random.default_rng(3)
    for k in model.params:
        if k.endswith(".bias"):
            model.params[k] = r.uniform(-0.1, 0.1, model.params[k].shape)
    return model


@pytest.fixture(scope="session")
def desk_model():
    """Seeded, untrained desk-scale configuration (depth 4, channels 64/32/16/8)."""
    return build_unet(UNetConfig(seed=5))


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """One full `camscope demo` run shared by the end-to-end checks."""
    out = tmp_path_factory.mktemp("demo")
    start = time.perf_counter()
    code = main(["demo", "--out-dir", str(out), "--seed", "0"])
    elapsed = time.perf_counter() - start
    return {"out": out, "code": code, "elapsed": elapsed}


@pytest.fixture(scope="session")
def trained_model(demo_run):
    return load_weights(Path(demo_run["out"]) / "model.csw")
