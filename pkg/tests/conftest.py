from __future__ import annotations

import time

import numpy as np
import pytest

from genint.datagen import ColorPalette, LabeledImageSet

# acceptance lines collected during the session and echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_gray(n_per_class=6, side=6, seed=0, n_classes=10) -> LabeledImageSet:
    """Tiny grayscale 'digits': class c lights up a class-specific pixel block."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = rng.uniform(0, 0.2, size=(labels.size, side, side, 1)).astype(np.float32)
    for i, c in enumerate(labels):
        r, col = divmod(int(c), side)
        images[i, r % side, col % side, 0] = 1.0
        images[i, (r + 2) % side, (col + 3) % side, 0] = 1.0
    return LabeledImageSet(images, labels, None, None, {"kind": "toy"})


@pytest.fixture
def gray_small():
    return make_gray()


@pytest.fixture(scope="session")
def palette():
    return ColorPalette.hsv()


@pytest.fixture(scope="session")
def tiny_colored():
    from genint.datagen import synth_colored_mnist

    return synth_colored_mnist(make_gray(n_per_class=12, side=4), ColorPalette.hsv(), "train_confounded", seed=1)


@pytest.fixture(scope="session")
def tiny_cvae(tiny_colored):
    from genint.genmodel import CVAE

    return CVAE(latent_dim=4, hidden_units=24, epochs=5, batch_size=32, learning_rate=3e-3).fit(
        tiny_colored.images, tiny_colored.labels
    )


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """The default experiment (seed 7) run twice in separate directories."""
    from genint.config import parse_config_string
    from genint.pipeline import run_pipeline

    configs, seconds = [], []
    for name in ("first", "second"):
        config = parse_config_string(f"[run]\nseed = 7\nout = {tmp_path_factory.mktemp(name) / 'run'}\n")
        start = time.perf_counter()
        run_pipeline(config)
        seconds.append(time.perf_counter() - start)
        configs.append(config)
    return configs, seconds
