"""Score-level fusion with an L1-penalized Cox model over unimodal risk scores."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cohort import stratified_assign
from .survival import NoEventsError, check_survival

RIDGE = 1e-6


class CoxDesign:
    """Cached risk-set bookkeeping for repeated partial-likelihood evaluations.

    The objective is scaled by ``1/n``: nll(beta) / n.
    """

    def __init__(self, X, time, event):
        self.X = np.asarray(X, dtype=np.float64)
        self.time, self.event = check_survival(time, event)
        self.n = self.time.size
        self.order = np.argsort(self.time, kind="stable")
        t_sorted = self.time[self.order]
        # position of each subject's risk set start in sorted order
        self.first = np.searchsorted(t_sorted, self.time, side="left")

    def _tail(self, w):
        return np.cumsum(w[self.order][::-1])[::-1][self.first]

    def loss(self, eta) -> float:
        c = eta.max()
        s0 = self._tail(np.exp(eta - c))
        ev = self.event
        return float(np.sum(np.log(s0[ev]) + c - eta[ev]) / self.n)

    def coordinate_derivs(self, eta, j: int) -> tuple[float, float, float]:
        """Loss and first/second derivative along coordinate ``j``."""
        c = eta.max()
        w = np.exp(eta - c)
        x = self.X[:, j]
        ev = self.event
        s0 = self._tail(w)[ev]
        s1 = self._tail(w * x)[ev]
        s2 = self._tail(w * x * x)[ev]
        loss = np.sum(np.log(s0) + c - eta[ev]) / self.n
        grad = np.sum(s1 / s0 - x[ev]) / self.n
        hess = np.sum(s2 / s0 - (s1 / s0) ** 2) / self.n
        return float(loss), float(grad), float(hess)

    def gradient(self, beta) -> np.ndarray:
        eta = self.X @ beta
        return np.array([self.coordinate_derivs(eta, j)[1] for j in range(self.X.shape[1])])


def _soft(z: float, t: float) -> float:
    return float(np.sign(z) * max(abs(z) - t, 0.0))


def coordinate_descent(design: CoxDesign, lam: float, ridge, beta0=None,
                       tol: float = 1e-8, max_sweeps: int = 10_000) -> tuple[np.ndarray, int]:
    """Minimize nll/n + lam*|beta|_1 + 0.5*sum(ridge*beta^2) one coordinate at a time.

    Each coordinate takes a proximal Newton step, halved until the objective
    does not increase. Stops when the largest coordinate change is below ``tol``.
    """
    m = design.X.shape[1]
    ridge = np.broadcast_to(np.asarray(ridge, dtype=np.float64), (m,))
    beta = np.zeros(m) if beta0 is None else np.array(beta0, dtype=np.float64)
    eta = design.X @ beta

    def objective(loss, b):
        return loss + lam * np.abs(b).sum() + 0.5 * np.sum(ridge * b * b)

    for sweep in range(1, max_sweeps + 1):
        biggest = 0.0
        for j in range(m):
            loss, g, h = design.coordinate_derivs(eta, j)
            g += ridge[j] * beta[j]
            h = max(h + ridge[j], 1e-12)
            old = beta[j]
            target = _soft(h * old - g, lam) / h
            if target == old:
                continue
            f_old = objective(loss, beta)
            step = target - old
            for _ in range(60):
                trial = beta.copy()
                trial[j] = old + step
                eta_trial = eta + design.X[:, j] * step
                if objective(design.loss(eta_trial), trial) <= f_old + 1e-15 * max(1.0, abs(f_old)):
                    break
                step *= 0.5
            else:
                continue
            beta[j] = old + step
            eta = eta_trial
            biggest = max(biggest, abs(step))
        if biggest < tol:
            return beta, sweep
    return beta, max_sweeps


def _collinear_groups(Z: np.ndarray, tol: float = 1e-10) -> list[list[tuple[int, float]]]:
    """Group standardized columns that are exactly (anti-)collinear.

    Each group is a list of ``(column, sign)`` relative to its first member.
    """
    n, m = Z.shape
    corr = Z.T @ Z / n
    groups: list[list[tuple[int, float]]] = []
    placed: set[int] = set()
    for j in range(m):
        if j in placed:
            continue
        group = [(j, 1.0)]
        placed.add(j)
        for k in range(j + 1, m):
            if k not in placed and abs(abs(corr[j, k]) - 1.0) < tol:
                group.append((k, float(np.sign(corr[j, k]))))
                placed.add(k)
        groups.append(group)
    return groups


@dataclass(frozen=True)
class LateFusionWeights:
    modalities: tuple[str, ...]
    beta: np.ndarray          # on the raw score scale
    beta_std: np.ndarray      # on the standardized score scale
    lam: float
    lambdas: np.ndarray
    cv_scores: np.ndarray     # cross-validated log partial likelihood per lambda
    degenerate: bool

    @property
    def normalized(self) -> np.ndarray:
        """|beta| / sum |beta| (all zeros when every coefficient is zero)."""
        total = np.abs(self.beta).sum()
        if total == 0:
            return np.zeros_like(self.beta)
        return np.abs(self.beta) / total


def lambda_max(design: CoxDesign) -> float:
    return float(np.max(np.abs(design.gradient(np.zeros(design.X.shape[1])))))


def lambda_grid(lam_max: float, n_lambda: int = 50, decades: float = 3.0) -> np.ndarray:
    return lam_max * np.logspace(0.0, -decades, n_lambda)


def _path(design, lambdas, ridge):
    betas = []
    beta = None
    for lam in lambdas:
        beta, _ = coordinate_descent(design, lam, ridge, beta)
        betas.append(beta.copy())
    return betas


def cox_lasso_fit(scores, time, event, modalities=None, lambdas=None, cv_folds: int = 5,
                  seed: int = 0, ridge: float = RIDGE, n_lambda: int = 50) -> LateFusionWeights:
    """Cross-validated L1-penalized Cox regression of survival on modality scores.

    Columns are standardized (population std) before fitting and coefficients
    are returned on both scales. The penalty is chosen by the cross-validated
    partial likelihood, summing l(beta_-k; all) - l(beta_-k; all but fold k)
    over folds. Exactly collinear columns share their coefficient equally,
    which is the solution the ridge term selects among the tied L1 optima.
    """
    X = np.asarray(scores, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("late fusion needs a patients x modalities matrix with >= 2 columns")
    time, event = check_survival(time, event)
    if X.shape[0] != time.size:
        raise ValueError(f"{X.shape[0]} score rows for {time.size} patients")
    if not np.all(np.isfinite(X)):
        raise ValueError("risk scores must be finite")
    if not event.any():
        raise NoEventsError("no events: cannot fit the late-fusion Cox model")
    if event.sum() < cv_folds:
        raise ValueError(f"{int(event.sum())} events is fewer than {cv_folds} CV folds")
    m = X.shape[1]
    names = tuple(modalities) if modalities is not None else tuple(f"m{j}" for j in range(m))
    if len(names) != m:
        raise ValueError("one modality id per score column required")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    if np.any(scale == 0):
        bad = [names[j] for j in np.flatnonzero(scale == 0)]
        raise ValueError(f"score column(s) {bad} are constant")
    Z = (X - center) / scale

    groups = _collinear_groups(Z)
    reps = [g[0][0] for g in groups]
    Zr = Z[:, reps]
    ridge_r = np.array([ridge / len(g) for g in groups])

    full = CoxDesign(Zr, time, event)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(full), n_lambda)
    lambdas = np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]

    cv = np.zeros(lambdas.size)
    if cv_folds >= 2 and lambdas.size > 1:
        fold = stratified_assign(event.astype(int), cv_folds, np.random.default_rng(seed))
        for k in range(cv_folds):
            tr = fold != k
            part = CoxDesign(Zr[tr], time[tr], event[tr])
            for i, b in enumerate(_path(part, lambdas, ridge_r)):
                # log-likelihoods, so the sign flips relative to the 1/n losses
                cv[i] += -full.loss(Zr @ b) * full.n + part.loss(Zr[tr] @ b) * part.n
    best = int(np.argmax(cv))
    beta_r = _path(full, lambdas[: best + 1], ridge_r)[-1]

    beta_std = np.zeros(m)
    for group, b in zip(groups, beta_r):
        for j, sign in group:
            beta_std[j] = sign * b / len(group)
    beta = beta_std / scale
    degenerate = not np.any(beta_std)
    if degenerate:
        warnings.warn(f"late fusion shrank every coefficient to zero (lambda={lambdas[best]:.3g})",
                      RuntimeWarning, stacklevel=2)
    return LateFusionWeights(names, beta, beta_std, float(lambdas[best]), lambdas, cv, degenerate)


def combine(scores, weights) -> np.ndarray | float:
    """Fused risk: raw coefficients dotted with each score row."""
    beta = weights.beta if isinstance(weights, LateFusionWeights) else np.asarray(weights, float)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] != beta.size:
        raise ValueError(f"{scores.shape[-1]} scores for {beta.size} weights")
    out = scores @ beta
    return float(out) if out.ndim == 0 else out
