"""Shared test utilities: finite-difference oracles and gradient comparison."""

import numpy as np
import pytest

from hiergen.tensor import Tensor


def fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, f: np.ndarray) -> float:
    """Worst-case mixed relative/absolute disagreement between two gradients."""
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
    return float((np.abs(a - f) / denom).max()) if a.size else 0.0


def check_gradient(build_loss, inputs: list[np.ndarray], tol: float = 1e-4,
                   h: float = 1e-5, sample: int | None = None,
                   rng: np.random.Generator | None = None):
    """Compare autodiff gradients of build_loss(*tensors) against central FD.

    `build_loss` must construct the loss fresh from raw arrays each call.
    With `sample`, only that many coordinates per input are FD-checked.
    """
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = build_loss(*tensors)
    loss.backward()
    for k, (t, x) in enumerate(zip(tensors, inputs)):
        def scalar(arr, _k=k):
            args = [inputs[j] if j != _k else arr for j in range(len(inputs))]
            return float(build_loss(*[Tensor(a) for a in args]).data)

        ad = t.grad if t.grad is not None else np.zeros_like(x)
        if sample is not None and x.size > sample:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(x.size, size=sample, replace=False)
            fd_flat = np.zeros(x.size)
            work = x.copy().reshape(-1)
            for i in idx:
                orig = work[i]
                work[i] = orig + h
                hi = scalar(work.reshape(x.shape))
                work[i] = orig - h
                lo = scalar(work.reshape(x.shape))
                work[i] = orig
                fd_flat[i] = (hi - lo) / (2.0 * h)
            err = rel_err(ad.reshape(-1)[idx], fd_flat[idx])
        else:
            fd = fd_gradient(lambda arr: scalar(arr), x.copy(), h)
            err = rel_err(ad, fd)
        assert err < tol, f"input {k}: autodiff/FD mismatch {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
