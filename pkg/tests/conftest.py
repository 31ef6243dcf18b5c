import numpy as np
import pytest

from trafficpredict import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, arrays, h=1e-5, rtol=1e-4):
    """``build(tape, *leaves) -> scalar tensor``; compare tape gradients with central differences."""
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(tape, *leaves)
    tape.backward(loss)

    def value():
        t = ad.Tape()
        return float(build(t, *[t.leaf(a) for a in arrays]).value)

    for a, leaf in zip(arrays, leaves):
        num = numeric_grad(value, a, h)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        err = np.abs(got - num) / np.maximum(1.0, np.abs(num))
        assert err.max() <= rtol, (err.max(), got, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance verdict for the summary."""
    store = request.config.stash.setdefault(_criteria, {})

    def record(number, passed, detail):
        store[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_criteria, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
