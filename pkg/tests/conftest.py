import numpy as np
import pytest

from dgkan.numcore import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


def gradcheck(f, x, analytic, h=1e-5, tol=1e-4):
    """Assert analytic gradient of scalar f matches central differences."""
    from dgkan.numcore import finite_diff_grad, max_rel_err
    numeric = finite_diff_grad(f, np.asarray(x, dtype=np.float64), h)
    err = max_rel_err(analytic, numeric)
    assert err <= tol, f"gradient mismatch: max rel err {err:.3e} > {tol}"
    return err


def gradcheck_vec(f, x, analytic, h=1e-5, tol=1e-4):
    """Vector-scale variant: worst absolute gap over the gradient's sup-norm.

    Used for input gradients, where individual Gaussian-tail components sit
    below the finite-difference noise floor.
    """
    from dgkan.numcore import finite_diff_grad
    a = np.asarray(analytic, dtype=np.float64).ravel()
    g = finite_diff_grad(f, np.asarray(x, dtype=np.float64), h).ravel()
    scale = max(np.abs(a).max(), np.abs(g).max(), 1e-8)
    err = float(np.abs(a - g).max() / scale)
    assert err <= tol, f"gradient mismatch: sup-norm rel err {err:.3e} > {tol}"
    return err
