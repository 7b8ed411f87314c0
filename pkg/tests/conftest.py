import numpy as np
import pytest

from hypergen import tensor as T


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(arrays)
        x[idx] = old - h
        fm = f(arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build, arrays, h=1e-5):
    """Max relative error between tape gradients and finite differences.

    ``build(tensors) -> scalar Tensor``; every array gets a gradient.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(arrs):
        with T.no_grad():
            return build([T.Tensor(a) for a in arrs]).item()

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape():
        grads = T.backward(build(leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(arrays[i]))
        worst = max(worst, rel_error(analytic, numeric_grad(value, arrays, i, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
