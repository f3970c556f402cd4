"""Shared fixtures and the finite-difference harness."""

import numpy as np
import pytest

from recursor.model import ModelSpec, ShareStrategy, init_model


def fd_grad(loss_fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar closure w.r.t. one array.

    The closure must recompute the loss from the array's current contents;
    entries are perturbed in place and restored.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + eps
        hi = loss_fn()
        array[idx] = orig - eps
        lo = loss_fn()
        array[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-relative error between two gradients."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


GRAD_TOL = 1e-4


def tiny_spec(n_layers=4, n_recursions=2, share=ShareStrategy.CYCLE, **kw) -> ModelSpec:
    defaults = dict(d_model=16, n_heads=2, n_kv_heads=1, d_head=8,
                    d_inter=32, vocab_size=31, context_len=64)
    defaults.update(kw)
    return ModelSpec(n_layers=n_layers, n_recursions=n_recursions, share=share,
                     **defaults)


@pytest.fixture
def small_model():
    spec = tiny_spec()
    return init_model(spec, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
