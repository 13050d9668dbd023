import time

import numpy as np
import pytest

from supunet import data
from supunet.data import Sample
from supunet.model import UNetConfig, build
from supunet.trainer import TrainConfig, train

OVERFIT_CONFIG = UNetConfig(input_size=(32, 32), depth=2, base_channels=8, lambda_bottleneck=1.0)


def run_overfit(directory, lam=1.0, seed=0, steps=500):
    """The reference overfit recipe: 8 easy 32x32 phantoms, lr 0.05."""
    samples = data.generate_samples(8, 32, 32, "easy", seed)
    config = UNetConfig(input_size=(32, 32), depth=2, base_channels=8, lambda_bottleneck=lam)
    model, _ = build(config, seed)
    tcfg = TrainConfig(
        steps=steps, learning_rate=0.05, lambda_bottleneck=lam, seed=seed,
        checkpoint_path=directory / "model.ckpt", log_path=directory / "model.ckpt.log",
    )
    start = time.perf_counter()
    log = train(model, samples, tcfg)
    return {
        "model": model,
        "samples": samples,
        "log": log,
        "seconds": time.perf_counter() - start,
        "ckpt": (directory / "model.ckpt").read_bytes(),
        "log_text": (directory / "model.ckpt.log").read_text(),
        "dir": directory,
    }


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    return run_overfit(tmp_path_factory.mktemp("overfit"))


def perfect_model(size=(16, 16)):
    """Hand-set weights whose class-1 logit is ``x - 0.5`` at every pixel.

    The input passes unchanged through enc0, the skip connection and dec0;
    every other weight is zero, so the up-sampled branch contributes nothing.
    """
    model, params = build(UNetConfig(input_size=size, depth=1, base_channels=1, fc_hidden=2), 0)
    for p in params:
        p.value[...] = 0.0
    for name in ("enc0.conv1", "enc0.conv2", "dec0.conv2"):
        params[f"{name}.weight"].value[0, 0, 1, 1] = 1.0
    params["dec0.conv1.weight"].value[0, 0, 1, 1] = 1.0  # skip channel only
    params["out.weight"].value[1, 0, 0, 0] = 1.0
    params["out.bias"].value[1] = -0.5
    return model


def two_level_samples(count, size=(16, 16), seed=0):
    """Phantom masks rendered as exactly separable 0.25 / 0.75 images."""
    out = []
    for s in data.generate_samples(count, size[0], size[1], "easy", seed):
        out.append(Sample(image=(0.25 + 0.5 * s.mask.astype(np.float64))[None, None], mask=s.mask))
    return out


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_RESULTS[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    print(ACCEPTANCE_RESULTS[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
