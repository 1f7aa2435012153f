import numpy as np
import pytest

from nargact import autodiff as ad


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = fn(*arrays)
            a[i] = old - h
            fm = fn(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build, arrays, h=1e-5):
    """Compare backward() against central differences; returns the worst relative error.

    ``build`` maps leaf Tensors to an output Tensor; the scalar probed is
    sum(output * W) for a fixed random W.
    """
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    w = np.random.default_rng(123).standard_normal(out.shape)
    loss = ad.tsum(out * ad.Tensor(w))
    loss.backward()

    def scalar(*arrs):
        with ad.no_grad():
            o = build(*[ad.Tensor(x) for x in arrs])
        return float((o.data * w).sum())

    num = numeric_grad(scalar, [a.copy() for a in arrays], h)
    return max(rel_err(leaf.grad, n) for leaf, n in zip(leaves, num))


@pytest.fixture
def rng():
    return ad.make_rng(0)


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; printed again in the terminal summary."""

    def record(ok: bool | None, label: str, detail: str = "") -> None:
        tag = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{tag}] {label}" + (f": {detail}" if detail else "")
        VERDICTS.append(line)
        print(line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
