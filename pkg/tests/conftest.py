import numpy as np
import pytest

from kdsearch import autograd as ag
from kdsearch.data import SplitSpec, generate

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; tiny gradients fall back to absolute error."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    return diff / scale if scale > 1e-8 else diff


def numeric_grad(f, x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, which is perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(fn, *arrays, eps: float = FD_STEP) -> float:
    """Worst relative error between autograd and finite differences over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        def f():
            return float(fn(*[ag.Tensor(b) for b in arrays]).data)

        num = numeric_grad(f, a, eps)
        got = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(got, num))
    return worst


def check_model_grads(model, loss_fn, eps: float = FD_STEP) -> dict:
    """Per-parameter-block relative error of ``loss_fn()`` gradients on ``model``."""
    from kdsearch.models import backward

    grads = backward(loss_fn(), model)
    errors = {}
    for name, p in model.params.items():
        def f():
            return float(loss_fn().data)

        num = numeric_grad(f, p.data, eps)
        errors[name] = rel_error(grads[name], num)
    return errors


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(SplitSpec(n_identities=6, n_train_scenes=12, n_gallery_scenes=8, n_queries=4, seed=3))


@pytest.fixture(scope="session")
def default_dataset():
    return generate(SplitSpec())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
