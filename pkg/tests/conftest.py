import numpy as np
import pytest

from segfuse import autodiff as ad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_gradients_match(build_loss, params, rtol: float = 1e-3, h: float = 1e-4):
    """Check analytic gradients of `build_loss()` against central differences.

    `build_loss` must rebuild the whole computation from the current parameter
    values on every call (the tape is single-use).
    """
    ad.zero_gradients(params)
    loss = build_loss()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        numeric = ad.finite_difference_gradient(lambda _p: build_loss(), p, h=h)
        err = relative_gradient_error(a, numeric)
        assert err <= rtol, f"gradient mismatch {err:.2e} for parameter of shape {p.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
