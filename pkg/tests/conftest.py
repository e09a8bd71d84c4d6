import numpy as np
import pytest

from candistill.canio import CanFrame, Label, split_dataset
from candistill.numerics import Tape


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --runslow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_frames(n_normal: int, n_attack: int, seed: int = 0) -> list[CanFrame]:
    """Benign frames on IDs 0x100-0x1FF with random payloads, DoS frames on 0x000"""
    rng = np.random.default_rng(seed)
    frames = []
    kinds = np.array([Label.NORMAL] * n_normal + [Label.ATTACK] * n_attack)
    rng.shuffle(kinds)
    for i, kind in enumerate(kinds):
        if kind == Label.ATTACK:
            frames.append(CanFrame(i * 0.001, 0x000, 8, (0,) * 8, Label.ATTACK))
        else:
            can_id = int(rng.integers(0x100, 0x200))
            data = tuple(int(b) for b in rng.integers(0, 256, size=8))
            frames.append(CanFrame(i * 0.001, can_id, 8, data, Label.NORMAL))
    return frames


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def separable_split():
    return split_dataset(make_frames(140, 60, seed=3), train_ratio=0.7, seed=0)


def gradient_error(fn, params, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients of scalar ``fn()`` and central differences"""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + h
            plus = fn().item()
            p.data[idx] = original - h
            minus = fn().item()
            p.data[idx] = original
            numeric[idx] = (plus - minus) / (2 * h)
        scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / scale))
    return worst


@pytest.fixture
def grad_check():
    return gradient_error
