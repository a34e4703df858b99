import numpy as np
import pytest

from polarfusion.config import PipelineConfig
from polarfusion.tensor import Tensor, mul, sum_all


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f w.r.t. every element of x (modified in place, restored)."""
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


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def check_op_grads(op, arrays, rng, tol=1e-4):
    """Compare tape gradients of sum(R * op(*tensors)) with central differences for every input."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)
    sum_all(mul(out, Tensor(weights))).backward()

    def value():
        return float(np.sum(weights * op(*[Tensor(a) for a in arrays]).data))

    errs = []
    for t, a in zip(tensors, arrays):
        num = numeric_grad(value, a)
        errs.append(rel_error(t.grad, num))
        assert errs[-1] < tol, f"gradient mismatch {errs[-1]:.2e}"
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_cfg():
    return PipelineConfig()


def pytest_terminal_summary(terminalreporter):
    from oracles import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
