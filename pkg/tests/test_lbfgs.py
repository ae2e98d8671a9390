import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from retinastack.lbfgs import (
    LbfgsConfig,
    LogisticModel,
    NonFiniteError,
    fit_logistic,
    lbfgs_minimize,
    logistic_objective,
    predict_logistic,
)


def quadratic(A, b):
    def fun(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b
    return fun


def random_spd(rng, n, cond):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.linspace(1.0, cond, n)
    return (q * eig) @ q.T


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_trivial_bowl():
    a = np.array([1.0, -2.0, 3.0])
    res = lbfgs_minimize(lambda x: (np.sum((x - a) ** 2), 2 * (x - a)), np.zeros(3))
    assert res.converged and np.allclose(res.x, a, atol=1e-10)
    assert res.iterations <= 3


def test_rosenbrock():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_quadratic_matches_solve(seed, n):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, 10 ** rng.uniform(0, 3))
    b = rng.normal(size=n)
    res = lbfgs_minimize(quadratic(A, b), np.zeros(n))
    assert res.converged
    assert np.max(np.abs(res.grad)) < 1e-8
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-7)


def test_iteration_limit_reported():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 20, 1e3)
    res = lbfgs_minimize(quadratic(A, rng.normal(size=20)), np.zeros(20), LbfgsConfig(max_iterations=2))
    assert not res.converged and res.message == "iteration limit reached"


def test_nonfinite_start():
    with pytest.raises(NonFiniteError):
        lbfgs_minimize(lambda x: (np.nan, x), np.zeros(2))


def test_config_validation():
    with pytest.raises(ValueError):
        LbfgsConfig(c1=0.9, c2=0.1)
    with pytest.raises(ValueError):
        LbfgsConfig(memory=0)


def test_matches_scipy_on_logistic():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 5))
    y = (X @ rng.normal(size=5) + rng.normal(size=200) > 0).astype(float)
    fun = logistic_objective(X, y, 1e-2)
    ours = lbfgs_minimize(fun, np.zeros(6))
    ref = scipy_opt.minimize(fun, np.zeros(6), jac=True, method="L-BFGS-B",
                             options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 1000})
    assert np.allclose(ours.x, ref.x, atol=1e-6)


# -- logistic regression --------------------------------------------------------

def _data(rng, n=150, d=4, noise=1.0):
    X = rng.normal(size=(n, d))
    y = (X @ rng.normal(size=d) + noise * rng.normal(size=n) > 0).astype(float)
    return X, y


def test_logistic_stationary(rng):
    X, y = _data(rng)
    m = fit_logistic(X, y, 1e-3)
    _, g = logistic_objective(X, y, 1e-3)(np.r_[m.coefficients, m.intercept])
    assert np.max(np.abs(g)) < 1e-7
    assert m.converged and not m.degenerate


def test_logistic_objective_gradient(rng):
    X, y = _data(rng, 30, 3)
    fun = logistic_objective(X, y, 0.1)
    theta = rng.normal(size=4)
    _, g = fun(theta)
    h = 1e-6
    fd = np.array([(fun(theta + h * e)[0] - fun(theta - h * e)[0]) / (2 * h) for e in np.eye(4)])
    assert np.allclose(g, fd, atol=1e-8)


def test_intercept_not_penalized(rng):
    # all-positive-ish rates with a huge penalty: coefficients vanish, intercept does not
    X = rng.normal(size=(100, 2))
    y = (rng.random(100) < 0.8).astype(float)
    m = fit_logistic(X, y, 1e6)
    assert np.allclose(m.coefficients, 0, atol=1e-5)
    assert m.intercept == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-4)


def test_single_class_fallback():
    X = np.ones((5, 2))
    with pytest.warns(UserWarning, match="single-class"):
        m = fit_logistic(X, np.zeros(5))
    assert m.degenerate and np.all(m.coefficients == 0)
    assert np.all(predict_logistic(m, X) < 1e-6)


def test_logistic_errors(rng):
    X, y = _data(rng, 20, 2)
    with pytest.raises(ValueError):
        fit_logistic(X, y[:-1])
    with pytest.raises(ValueError):
        fit_logistic(X, y * 2)
    m = fit_logistic(X, y)
    with pytest.raises(ValueError):
        predict_logistic(m, X[:, :1])


def test_model_json_roundtrip(rng):
    X, y = _data(rng, 40, 3)
    m = fit_logistic(X, y, feature_names=["a", "b", "c"])
    back = LogisticModel.from_json(m.to_json())
    assert np.array_equal(back.coefficients, m.coefficients)
    assert back.intercept == m.intercept and back.feature_names == ["a", "b", "c"]
    assert np.array_equal(predict_logistic(back, X), predict_logistic(m, X))
