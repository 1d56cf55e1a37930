import numpy as np
import pytest

from lrcnet import autodiff as ad

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record_criterion(number, title, passed, detail=""):
    line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def grad_of(fn, *arrays):
    """Tape gradients of scalar fn(*tensors) wrt each input array."""
    ts = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*ts)
    return tape.backward(out, ts)


def fd_grad(fn, *arrays, step=1e-5):
    """Central differences of scalar fn over every entry of every input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = float(fn(*[ad.Tensor(x) for x in arrays]).data)
            flat[i] = old - step
            fm = float(fn(*[ad.Tensor(x) for x in arrays]).data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out
