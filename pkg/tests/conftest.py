import numpy as np
import pytest

from hicontrast import tensor as T
from hicontrast.encoders import EncoderConfig
from hicontrast.synth import DatasetSpec, SourceSpec, make_dataset


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (edited in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        up = f()
        flat[k] = old - eps
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * eps)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_op_grad(build, *arrays, tol=1e-6, eps=1e-5):
    """Compare backward() against finite differences of ``build(*tensors)``."""
    params = [T.parameter(a.copy()) for a in arrays]
    loss = build(*params)
    loss.backward()
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: build(*[T.constant(q.data) for q in params]).item(), p.data, eps)
        worst = max(worst, rel_err(p.grad, num))
    assert worst <= tol, f"relative gradient error {worst:.2e} > {tol:.0e}"
    return worst


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(dense_hidden=8, dense_out=8, sparse_hidden=8, embed_dim=8)


@pytest.fixture(scope="session")
def small_dataset():
    spec = DatasetSpec(sources=[SourceSpec(6), SourceSpec(2, ("rgb", "keypoints"))], seed=3)
    return make_dataset(spec)
