import numpy as np
import pytest

from gliofuse.cohort import SynthConfig, synth_generate
from gliofuse.late_fusion import (CoxDesign, combine, coordinate_descent, cox_lasso_fit,
                                  lambda_grid, lambda_max)
from gliofuse.survival import NoEventsError, cox_loss

from oracles import cox_newton


def _scores(rng, n=300, m=3, coef=(1.0, 0.5, 0.0)):
    X = rng.normal(size=(n, m)) * np.array([1.0, 2.0, 0.5])[:m]
    t = rng.exponential(1.0 / np.exp(X @ np.array(coef[:m])))
    c = rng.exponential(1.5, n)
    return X, np.minimum(t, c), t <= c


def test_design_loss_matches_cox_loss():
    rng = np.random.default_rng(0)
    X, time, event = _scores(rng, 50)
    d = CoxDesign(X, time, event)
    beta = np.array([0.3, -0.2, 0.5])
    assert d.loss(X @ beta) == pytest.approx(cox_loss(X @ beta, time, event)[0] / 50, rel=1e-12)


def test_unpenalized_fit_matches_dense_newton():
    rng = np.random.default_rng(1)
    for trial in range(3):
        X, time, event = _scores(rng, 80 + 40 * trial)
        fit = cox_lasso_fit(X, time, event, lambdas=[0.0], ridge=0.0)
        ref = cox_newton(X, time, event)
        assert np.max(np.abs(fit.beta - ref)) < 1e-6


def test_lambda_max_zeroes_all_coefficients():
    rng = np.random.default_rng(2)
    X, time, event = _scores(rng)
    Z = (X - X.mean(0)) / X.std(0)
    d = CoxDesign(Z, time, event)
    lmax = lambda_max(d)
    beta, _ = coordinate_descent(d, lmax * 1.0001, 0.0)
    assert not beta.any()
    beta, _ = coordinate_descent(d, lmax * 0.5, 0.0)
    assert beta.any()
    grid = lambda_grid(lmax)
    assert grid.size == 50 and grid[0] == lmax and grid[-1] == pytest.approx(lmax * 1e-3)


def test_lasso_solution_satisfies_kkt():
    rng = np.random.default_rng(3)
    X, time, event = _scores(rng, 200, coef=(0.8, 0.05, 0.0))
    d = CoxDesign(X, time, event)
    lam = 0.3 * lambda_max(d)
    beta, _ = coordinate_descent(d, lam, 0.0, tol=1e-12)
    g = d.gradient(beta)
    for j in range(3):
        if beta[j] != 0:
            assert g[j] == pytest.approx(-lam * np.sign(beta[j]), abs=1e-7)
        else:
            assert abs(g[j]) <= lam + 1e-9


def test_duplicated_columns_share_weight_equally():
    rng = np.random.default_rng(4)
    X, time, event = _scores(rng, 300, m=1, coef=(1.0,))
    fit = cox_lasso_fit(np.column_stack([X[:, 0], X[:, 0]]), time, event, ["a", "b"])
    assert fit.normalized == pytest.approx([0.5, 0.5], abs=0.01)
    assert fit.beta[0] == fit.beta[1]
    # sign-flipped duplicate gets the mirrored coefficient
    flip = cox_lasso_fit(np.column_stack([X[:, 0], -X[:, 0]]), time, event)
    assert flip.beta[0] == pytest.approx(-flip.beta[1])


def test_equally_informative_modalities_get_equal_weight():
    synth = synth_generate(SynthConfig(n=1500, weights=(1.0, 1.0, 1.0), seed=7))
    cohort = synth.cohort
    scores = np.column_stack([synth.projection(m) for m in ("ffpe", "rna", "mri")])
    fit = cox_lasso_fit(scores, cohort.time, cohort.event, ("ffpe", "rna", "mri"))
    assert fit.normalized == pytest.approx([1 / 3] * 3, abs=0.05)
    assert fit.normalized.sum() == pytest.approx(1.0)


def test_uninformative_scores_degenerate_with_warning():
    rng = np.random.default_rng(5)
    n = 60
    time = rng.exponential(1.0, n)
    event = rng.random(n) < 0.6
    noise = rng.normal(size=(n, 2))
    with pytest.warns(RuntimeWarning, match="zero"):
        fit = cox_lasso_fit(noise, time, event, lambdas=[10.0, 5.0])
    assert fit.degenerate and not fit.normalized.any()


def test_input_validation_and_combine():
    rng = np.random.default_rng(6)
    X, time, event = _scores(rng, 40)
    with pytest.raises(ValueError):
        cox_lasso_fit(X[:, :1], time, event)
    with pytest.raises(ValueError, match="constant"):
        cox_lasso_fit(np.column_stack([X[:, 0], np.ones(40)]), time, event)
    with pytest.raises(NoEventsError):
        cox_lasso_fit(X, time, np.zeros(40, bool))
    fit = cox_lasso_fit(X, time, event, cv_folds=3)
    assert np.allclose(combine(X, fit), X @ fit.beta)
    assert combine(X[0], fit.beta) == pytest.approx(float(X[0] @ fit.beta))
    assert fit.lam in fit.lambdas and fit.cv_scores.shape == fit.lambdas.shape
