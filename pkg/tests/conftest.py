import numpy as np
import pytest

from stpam import autodiff as ad
from stpam.graph import biosemi64
from stpam.model import ModelConfig

SMALL_CHANNELS = ("Fz", "Cz", "Pz", "Oz", "C3", "C4", "P3", "P4")


@pytest.fixture(scope="session")
def layout64():
    return biosemi64()


@pytest.fixture(scope="session")
def small_layout(layout64):
    return layout64.subset(SMALL_CHANNELS)


def small_config(**kw) -> ModelConfig:
    base = dict(n_channels=len(SMALL_CHANNELS), n_times=64, window=16, n_slices=4, k_spatial=2,
                d_spatial=4, k_temporal=2, d_temporal=3, d_reduced=6, conv_channels=2)
    base.update(kw)
    return ModelConfig(**base)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def fd_grad(f, arrays, index, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=float) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*base)
        x[i] = old - h
        fm = f(*base)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op_gradients(build, arrays, rng, h=1e-5):
    """Compare tape gradients of sum(R * build(*tensors)) with central differences.

    Returns the largest relative error over all inputs.
    """
    probe = build(*[ad.Tensor(a) for a in arrays])
    R = rng.standard_normal(probe.shape)

    def scalar(*arrs):
        return float(np.sum(build(*[ad.Tensor(a) for a in arrs]).data * R))

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = ad.sum(ad.mask_mul(build(*tensors), R))
    grads = tape.backward(out, wrt=tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        worst = max(worst, rel_err(grads[t], fd_grad(scalar, arrays, i, h)))
    return worst


# acceptance reporting: one pass/fail line per criterion, echoed in the terminal summary
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])


@pytest.fixture
def criterion(request):
    """Record ``criterion(n, passed, detail)`` and return ``passed``."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[_CRITERIA][number] = line
        print(line)
        return passed
    return record
