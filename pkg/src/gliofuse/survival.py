"""Censored-survival statistics.

All functions take plain arrays: ``time`` (months, > 0), ``event`` (1 = death
observed, 0 = censored) and ``risk`` (log relative hazard, higher is worse).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class SurvivalDataError(ValueError):
    pass


class NoEventsError(SurvivalDataError):
    """The Cox partial likelihood is undefined without observed events."""


class NoComparablePairsError(SurvivalDataError):
    pass


SMALL_N = 25


def check_survival(time, event, risk=None):
    time = np.asarray(time, dtype=np.float64).reshape(-1)
    event = np.asarray(event).reshape(-1)
    if time.size == 0:
        raise SurvivalDataError("empty survival data")
    if event.shape != time.shape:
        raise SurvivalDataError(f"time has {time.size} entries but event has {event.size}")
    if not np.all(np.isfinite(time)) or np.any(time <= 0):
        raise SurvivalDataError("survival times must be finite and > 0")
    if not np.all((event == 0) | (event == 1)):
        raise SurvivalDataError("event indicators must be 0 or 1")
    event = event.astype(bool)
    if risk is None:
        return time, event
    risk = np.asarray(risk, dtype=np.float64).reshape(-1)
    if risk.shape != time.shape:
        raise SurvivalDataError(f"risk has {risk.size} entries but time has {time.size}")
    if not np.all(np.isfinite(risk)):
        raise SurvivalDataError("risk scores must be finite")
    return time, event, risk


@dataclass(frozen=True)
class SurvivalData:
    time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        time, event = check_survival(self.time, self.event)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)

    def __len__(self) -> int:
        return self.time.size

    def subset(self, idx) -> "SurvivalData":
        return SurvivalData(self.time[idx], self.event[idx])

    @property
    def n_events(self) -> int:
        return int(self.event.sum())


# ----------------------------------------------------------------- Cox model

def log_risk_set_sums(time, log_weights):
    """For each subject, log of the sum of ``exp(log_weights)`` over subjects with t_j >= t_i."""
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    tail = np.logaddexp.accumulate(log_weights[order][::-1])[::-1]
    return tail[np.searchsorted(t_sorted, time, side="left")]


def cox_loss(risk, time, event, reduction: str = "sum"):
    """Negative log partial likelihood (Breslow ties) and its gradient in ``risk``.

    Parameters
    ----------
    risk, time, event : array_like, shape (n,)
    reduction : {"sum", "mean"}
        ``"mean"`` divides loss and gradient by the number of events.

    Returns
    -------
    loss : float
    grad : ndarray, shape (n,)
    """
    time, event, risk = check_survival(time, event, risk)
    n_events = int(event.sum())
    if n_events == 0:
        raise NoEventsError("no events: Cox partial likelihood is undefined")
    log_denom = log_risk_set_sums(time, risk)
    loss = -np.sum(risk[event] - log_denom[event])

    # d/dr_k = -d_k + exp(r_k) * sum_{i event, t_i <= t_k} exp(-log_denom_i), in log space
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    inv = np.where(event, -log_denom, -np.inf)[order]
    cum_inv = np.logaddexp.accumulate(inv)
    last = np.searchsorted(t_sorted, time, side="right") - 1
    grad = np.exp(risk + cum_inv[last]) - event
    if reduction == "mean":
        return loss / n_events, grad / n_events
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad


@dataclass(frozen=True)
class BreslowBaseline:
    """Cumulative baseline hazard H0(t) as a right-continuous step function.

    Stored as log H0 at each event time so that survival stays defined for
    any spread of risks: S = exp(-exp(log H0 + r)).
    """

    times: np.ndarray
    log_cumhaz: np.ndarray

    def _log_h(self, t) -> np.ndarray:
        steps = np.concatenate(([-np.inf], self.log_cumhaz))
        return steps[np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")]

    def cumulative_hazard(self, t) -> np.ndarray:
        return np.exp(self._log_h(t))

    def survival(self, risk, grid) -> np.ndarray:
        """S(t | r) = exp(-H0(t) exp(r)) for each risk (rows) and grid time (columns)."""
        risk = np.asarray(risk, dtype=np.float64).reshape(-1, 1)
        log_h = self._log_h(np.asarray(grid, dtype=np.float64).reshape(1, -1))
        return np.exp(-np.exp(log_h + risk))


def breslow_baseline(risk, time, event) -> BreslowBaseline:
    time, event, risk = check_survival(time, event, risk)
    if not event.any():
        raise NoEventsError("no events: baseline hazard is undefined")
    log_denom = log_risk_set_sums(time, risk)
    event_times = np.unique(time[event])
    # Breslow: d(t) / sum_{risk set} exp(r), tied deaths share one denominator
    idx = np.searchsorted(np.sort(time), event_times, side="left")
    first = np.argsort(time, kind="stable")[idx]
    deaths = np.array([np.sum(event & (time == t)) for t in event_times], dtype=np.float64)
    increments = np.log(deaths) - log_denom[first]
    return BreslowBaseline(event_times, np.logaddexp.accumulate(increments))


# ------------------------------------------------------------- Kaplan-Meier

@dataclass(frozen=True)
class KMCurve:
    """Product-limit estimate; ``surv[i]`` holds S just after ``times[i]``."""

    times: np.ndarray
    surv: np.ndarray
    at_risk: np.ndarray

    def _lookup(self, t, side: str) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        steps = np.concatenate(([1.0], self.surv))
        return steps[np.searchsorted(self.times, t, side=side)]

    def __call__(self, t) -> np.ndarray:
        return self._lookup(t, "right")

    def left_limit(self, t) -> np.ndarray:
        """S(t-), the value just before ``t``."""
        return self._lookup(t, "left")


def kaplan_meier(time, event, reverse: bool = False) -> KMCurve:
    """Kaplan-Meier estimator; ``reverse=True`` estimates the censoring survival G."""
    time, event = check_survival(time, event)
    if reverse:
        event = ~event
    times = np.unique(time[event])
    at_risk = np.array([np.sum(time >= t) for t in times], dtype=np.int64)
    deaths = np.array([np.sum(event & (time == t)) for t in times], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / at_risk) if times.size else np.empty(0)
    return KMCurve(times, surv, at_risk)


# --------------------------------------------------------------- concordance

def concordance_counts(risk, time, event) -> tuple[int, int, int]:
    """(concordant, risk-tied, comparable) pair counts.

    A pair is comparable when the shorter time is an observed death and the
    two times differ.
    """
    time, event, risk = check_survival(time, event, risk)
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    concordant = comparable & (risk[:, None] > risk[None, :])
    tied = comparable & (risk[:, None] == risk[None, :])
    return int(concordant.sum()), int(tied.sum()), int(comparable.sum())


def concordance_index(risk, time, event) -> float:
    """Harrell's C: (concordant + 0.5 * risk ties) / comparable pairs."""
    conc, ties, comp = concordance_counts(risk, time, event)
    if comp == 0:
        raise NoComparablePairsError("no comparable pairs")
    return (conc + 0.5 * ties) / comp


# ------------------------------------------------------------- Brier scores

def default_grid(time, n_points: int = 100, lower: float = 5.0, upper: float = 95.0):
    """Evenly spaced times between two percentiles of the observed times."""
    time = np.asarray(time, dtype=np.float64)
    lo, hi = np.percentile(time, [lower, upper])
    return np.linspace(lo, hi, n_points)


@dataclass(frozen=True)
class BrierCurve:
    grid: np.ndarray
    scores: np.ndarray  # NaN where the grid point was dropped
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def integrated(self) -> float:
        keep = ~self.dropped
        t, s = self.grid[keep], self.scores[keep]
        if t.size == 0:
            raise SurvivalDataError("every grid point was dropped")
        if t.size == 1:
            return float(s[0])
        return float(np.trapezoid(s, t) / (t[-1] - t[0]))


def brier_curve(surv, time, event, grid, censoring: KMCurve | None = None) -> BrierCurve:
    """IPCW Brier score at each grid time.

    ``surv[i, j]`` is the predicted S(grid[j]) for patient i. Deaths at or
    before t are weighted by 1/G(t_i-), patients still at risk after t by
    1/G(t). Grid points where G(t) = 0 are dropped.
    """
    time, event = check_survival(time, event)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise SurvivalDataError("empty time grid")
    surv = np.asarray(surv, dtype=np.float64)
    if surv.shape != (time.size, grid.size):
        raise SurvivalDataError(f"surv must have shape {(time.size, grid.size)}, got {surv.shape}")
    if censoring is None:
        censoring = kaplan_meier(time, event, reverse=True)
    g_at_death = censoring.left_limit(time)
    g_grid = censoring(grid)
    dropped = g_grid <= 0
    scores = np.full(grid.size, np.nan)
    died = (time[:, None] <= grid[None, :]) & event[:, None]
    alive = time[:, None] > grid[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w_death = np.where(event & (g_at_death > 0), 1.0 / g_at_death, 0.0)
        term = (np.where(died, surv ** 2 * w_death[:, None], 0.0)
                + np.where(alive, (1.0 - surv) ** 2 / g_grid[None, :], 0.0))
    scores[~dropped] = term[:, ~dropped].mean(axis=0)
    if dropped.any():
        warnings.warn(f"{int(dropped.sum())} grid point(s) dropped: censoring survival is 0",
                      RuntimeWarning, stacklevel=2)
    return BrierCurve(grid, scores, dropped)


def integrated_brier(surv, time, event, grid, censoring: KMCurve | None = None) -> float:
    """Trapezoid-integrated IPCW Brier score divided by the grid span."""
    return brier_curve(surv, time, event, grid, censoring).integrated


def composite_score(ci: float, ibs: float) -> float:
    if not (0.0 <= ci <= 1.0 and 0.0 <= ibs <= 1.0):
        raise ValueError(f"CI and IBS must lie in [0, 1], got ci={ci}, ibs={ibs}")
    return (ci + (1.0 - ibs)) / 2


@dataclass(frozen=True)
class MetricsReport:
    ci: float
    ibs: float
    n_test: int
    ci_lower: float | None = None
    ci_upper: float | None = None

    @property
    def cs(self) -> float:
        return composite_score(self.ci, self.ibs)

    @property
    def small_n(self) -> bool:
        return self.n_test <= SMALL_N


def evaluate(test_risk, test_time, test_event, train_risk, train_time, train_event,
             grid=None) -> MetricsReport:
    """CI and IBS of test risks; survival curves come from a Breslow baseline
    fitted on the training risks."""
    ci = concordance_index(test_risk, test_time, test_event)
    base = breslow_baseline(train_risk, train_time, train_event)
    if grid is None:
        grid = default_grid(test_time)
    surv = base.survival(test_risk, grid)
    ibs = integrated_brier(surv, test_time, test_event, grid)
    return MetricsReport(ci=ci, ibs=ibs, n_test=int(np.size(test_time)))
