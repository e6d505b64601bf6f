"""Cross-validated experiments, bootstrap intervals and paired permutation tests."""
from __future__ import annotations

import itertools
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort, FoldPlan, intersect, make_folds, zscore_fit_apply
from .late_fusion import LateFusionWeights, combine, cox_lasso_fit
from .models import (ATTENTION_HEADS, STRATEGIES, EncoderSpec, FusionModel, HeadConfig,
                     ModelData, TrainConfig, TrainingAborted, train_model)
from .seeding import derive_seed
from .survival import (MetricsReport, NoComparablePairsError, breslow_baseline,
                       composite_score, concordance_counts, default_grid,
                       integrated_brier)

MAX_EXACT_FOLDS = 20


class ExperimentError(RuntimeError):
    pass


class NotControlledError(ValueError):
    """The two runs did not share a fold plan, so per-fold deltas are not paired."""


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 10_000
    level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.resamples < 100:
            raise ValueError("at least 100 bootstrap resamples are required")
        if not 0.0 < self.level < 1.0:
            raise ValueError("confidence level must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentSpec:
    """One configuration: which modalities, how they are fused and how it is validated.

    ``restrict_to`` names extra modalities that must be present for a patient
    to be included, so a bimodal model can run on the trimodal patient set.
    ``encoders`` maps a modality id to :class:`EncoderSpec` keyword arguments
    (everything except ``input_dim``, which comes from the data).
    """

    modalities: tuple[str, ...]
    strategy: str
    name: str | None = None
    restrict_to: tuple[str, ...] = ()
    encoders: Mapping[str, Mapping] = field(default_factory=dict)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 5
    test_fraction: float = 0.2
    n_test: int | None = None
    stratify: str = "event"
    seed: int = 0
    ensemble: str = "mean"
    bootstrap: BootstrapConfig | None = field(default_factory=BootstrapConfig)
    late_cv_folds: int = 5

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "restrict_to", tuple(self.restrict_to))
        count = len(self.modalities)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if count == 0 or len(set(self.modalities)) != count:
            raise ValueError("modalities must be distinct and non-empty")
        if self.strategy == "unimodal" and count != 1:
            raise ValueError("strategy 'unimodal' takes exactly one modality")
        if self.strategy in ATTENTION_HEADS and count != 2:
            raise ValueError(f"strategy {self.strategy!r} takes exactly two modalities")
        if self.strategy in ("early", "late", "joint") and count < 2:
            raise ValueError(f"strategy {self.strategy!r} needs at least two modalities")
        if self.ensemble not in ("mean", "refit"):
            raise ValueError(f"unknown ensemble mode {self.ensemble!r}")

    @property
    def cohort_modalities(self) -> tuple[str, ...]:
        return self.modalities + tuple(m for m in self.restrict_to if m not in self.modalities)

    @property
    def controlled(self) -> bool:
        return len(self.cohort_modalities) > len(self.modalities)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        base = "+".join(m.upper() for m in self.modalities)
        return base + ("†" if self.controlled else "")

    @property
    def fusion(self) -> str:
        return "none" if self.strategy == "unimodal" else self.strategy

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    val_ci_trace: list[float]
    best_epoch: int
    test_ci: float
    ibs: float
    cs: float


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    plan: FoldPlan
    folds: list[FoldResult]
    report: MetricsReport
    test_risk: np.ndarray
    fold_test_risks: np.ndarray
    grid: np.ndarray
    weights: LateFusionWeights | None = None
    bootstrap_skipped: int = 0
    wall_time: float = 0.0

    @property
    def plan_digest(self) -> str:
        return self.plan.digest()


@dataclass(frozen=True)
class BootstrapResult:
    lower: float
    upper: float
    skipped: int
    resamples: int

    @property
    def width(self) -> float:
        return self.upper - self.lower


def bootstrap_ci(risk, time, event, config: BootstrapConfig = BootstrapConfig()) -> BootstrapResult:
    """Percentile interval of the concordance index over patient resamples.

    Resamples without a comparable pair are skipped; more than half skipped
    is an error.
    """
    risk = np.asarray(risk, dtype=np.float64).reshape(-1)
    time = np.asarray(time, dtype=np.float64).reshape(-1)
    event = np.asarray(event).reshape(-1).astype(bool)
    n = risk.size
    if n < 3:
        raise ValueError("bootstrap needs at least 3 patients")
    rng = np.random.default_rng(config.seed)
    stats = np.empty(config.resamples)
    kept = 0
    for _ in range(config.resamples):
        idx = rng.integers(0, n, n)
        t, e, r = time[idx], event[idx], risk[idx]
        comparable = (t[:, None] < t[None, :]) & e[:, None]
        comp = int(comparable.sum())
        if comp == 0:
            continue
        conc = int((comparable & (r[:, None] > r[None, :])).sum())
        ties = int((comparable & (r[:, None] == r[None, :])).sum())
        stats[kept] = (conc + 0.5 * ties) / comp
        kept += 1
    skipped = config.resamples - kept
    if skipped > config.resamples / 2:
        raise ValueError(f"{skipped} of {config.resamples} resamples had no comparable pairs")
    alpha = (1.0 - config.level) / 2
    lower, upper = np.quantile(stats[:kept], [alpha, 1.0 - alpha])
    return BootstrapResult(float(lower), float(upper), skipped, config.resamples)


def paired_permutation_test(deltas: Sequence[float]) -> float:
    """Exact one-sided sign-flip p-value for a positive mean difference.

    p = #{s in {-1, +1}^k : mean(s * delta) >= mean(delta)} / 2^k, the
    identity assignment included, so p >= 2^-k.
    """
    d = np.asarray(deltas, dtype=np.float64).reshape(-1)
    k = d.size
    if k < 2:
        raise ValueError("the permutation test needs at least 2 paired deltas")
    if k > MAX_EXACT_FOLDS:
        raise ValueError(f"{k} folds: exact enumeration is limited to {MAX_EXACT_FOLDS}; "
                         "a Monte Carlo permutation test would be required")
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=k)))
    stats = signs @ d
    observed = d.sum()
    # tolerance absorbs summation-order rounding between equal statistics
    tol = 1e-12 * max(1.0, float(np.abs(d).sum()))
    return int(np.sum(stats >= observed - tol)) / 2 ** k


def _normalized_inputs(cohort: Cohort, modalities, fit_idx, *apply_idx):
    """Per modality, z-score with statistics from ``fit_idx`` only."""
    outs = [dict() for _ in range(len(apply_idx) + 1)]
    for m in modalities:
        x = cohort.features(m)
        parts = zscore_fit_apply(x[fit_idx], *(x[i] for i in apply_idx))
        for out, part in zip(outs, parts[:-1]):
            out[m] = part
    return outs


def _build(spec: ExperimentSpec, cohort: Cohort, modalities, seed: int) -> FusionModel:
    dims = {m: cohort.blocks[m].dim for m in modalities}
    strategy = "unimodal" if len(modalities) == 1 else spec.strategy
    encoders = {}
    for m in modalities:
        options = dict(spec.encoders.get(m, {}))
        if strategy == "joint" and not options:
            options = {"output_dim": dims[m]}
        if options:
            if "hidden" in options:
                options["hidden"] = tuple(options["hidden"])
            encoders[m] = EncoderSpec(dims[m], **options)
    return FusionModel.build(strategy, dims, encoders, head=spec.head, seed=seed,
                             head_lr=spec.train.head_lr)


def _fold_metrics(test_risk, train_risk, cohort, test_idx, train_idx, grid):
    time, event = cohort.time, cohort.event
    conc, ties, comp = concordance_counts(test_risk, time[test_idx], event[test_idx])
    if comp == 0:
        raise NoComparablePairsError("test set has no comparable pairs")
    ci = (conc + 0.5 * ties) / comp
    base = breslow_baseline(train_risk, time[train_idx], event[train_idx])
    surv = base.survival(test_risk, grid)
    ibs = integrated_brier(surv, time[test_idx], event[test_idx], grid)
    composite_score(ci, ibs)  # rejects an IBS outside [0, 1] here, where it is attributable
    return ci, ibs


def _train_one(spec, cohort, modalities, f, j, tr, va, test, train_all, refit_epochs=None):
    """Train one network; returns (val risk, test risk, all-train risk, trace, best epoch)."""
    seed = derive_seed(spec.seed, 1, f, j)
    model = _build(spec, cohort, modalities, seed)
    x_tr, x_va, x_te, x_all = _normalized_inputs(cohort, modalities, tr, va, test, train_all)
    time, event = cohort.time, cohort.event
    train = ModelData(x_tr, time[tr], event[tr])
    cfg = spec.train
    if refit_epochs is None:
        val = ModelData(x_va, time[va], event[va])
        cfg = TrainConfig(cfg.epochs, cfg.head_lr, cfg.patience, cfg.batch_size,
                          derive_seed(spec.seed, 3, f, j))
        result = train_model(model, train, cfg, val)
    else:
        cfg = TrainConfig(refit_epochs, cfg.head_lr, cfg.patience, cfg.batch_size,
                          derive_seed(spec.seed, 4, j))
        result = train_model(model, train, cfg)
    trace = [r.val_ci for r in result.trace]
    return (model.predict(x_va), model.predict(x_te), model.predict(x_all), trace,
            result.best_epoch)


def run_experiment(spec: ExperimentSpec, cohort: Cohort, workers: int = 1) -> ExperimentResult:
    """K-fold training with early stopping, then held-out test evaluation.

    The reported test risk is the mean of the fold models' test risks. Results
    do not depend on ``workers``: every fold draws from its own derived seed.
    """
    started = _time.perf_counter()
    sub = intersect(cohort, spec.cohort_modalities)
    if len(sub) == 0:
        raise ExperimentError(f"no patients have all of {spec.cohort_modalities}")
    plan = make_folds(sub, spec.k, spec.test_fraction, spec.seed, spec.n_test, spec.stratify)
    test = plan.test
    train_all = plan.train
    if test.size < 3:
        raise ExperimentError(f"held-out test set has only {test.size} patients")
    groups = ([(j, (m,)) for j, m in enumerate(spec.modalities)] if spec.strategy == "late"
              else [(0, spec.modalities)])

    def run_fold(f):
        tr, va = plan.folds[f]
        try:
            return [_train_one(spec, sub, mods, f, j, tr, va, test, train_all) for j, mods in groups]
        except TrainingAborted as exc:
            raise TrainingAborted(f"fold {f}: {exc}", exc.trace) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fold_outputs = list(pool.map(run_fold, range(plan.k)))
    else:
        fold_outputs = [run_fold(f) for f in range(plan.k)]

    time, event = sub.time, sub.event
    weights = None
    if spec.strategy == "late":
        oof = np.full((len(sub), len(groups)), np.nan)
        for f, outs in enumerate(fold_outputs):
            va = plan.folds[f][1]
            for j, out in enumerate(outs):
                oof[va, j] = out[0]
        weights = cox_lasso_fit(oof[train_all], time[train_all], event[train_all],
                                modalities=spec.modalities, cv_folds=spec.late_cv_folds,
                                seed=derive_seed(spec.seed, 2))
        fold_test = [combine(np.column_stack([o[1] for o in outs]), weights) for outs in fold_outputs]
        fold_all = [combine(np.column_stack([o[2] for o in outs]), weights) for outs in fold_outputs]
    else:
        fold_test = [outs[0][1] for outs in fold_outputs]
        fold_all = [outs[0][2] for outs in fold_outputs]

    grid = default_grid(time[test])
    folds = []
    for f, outs in enumerate(fold_outputs):
        tr = plan.folds[f][0]
        # fold models score every training patient; the baseline uses the fold's own train rows
        pos = np.searchsorted(train_all, tr)
        try:
            ci, ibs = _fold_metrics(fold_test[f], fold_all[f][pos], sub, test, tr, grid)
        except (ValueError, ArithmeticError) as exc:
            raise ExperimentError(f"fold {f}: {exc}") from exc
        folds.append(FoldResult(f, outs[0][3], outs[0][4], ci, ibs,
                                MetricsReport(ci, ibs, test.size).cs))

    fold_test_risks = np.stack(fold_test)
    if spec.ensemble == "refit":
        epochs = max(1, int(np.median([outs[0][4] for outs in fold_outputs])))
        outs = [_train_one(spec, sub, mods, plan.k, j, train_all, train_all, test, train_all,
                           refit_epochs=epochs) for j, mods in groups]
        if weights is not None:
            test_risk = combine(np.column_stack([o[1] for o in outs]), weights)
            train_risk = combine(np.column_stack([o[2] for o in outs]), weights)
        else:
            test_risk, train_risk = outs[0][1], outs[0][2]
    else:
        test_risk = fold_test_risks.mean(axis=0)
        train_risk = np.stack(fold_all).mean(axis=0)
    try:
        ci, ibs = _fold_metrics(test_risk, train_risk, sub, test, train_all, grid)
    except (ValueError, ArithmeticError) as exc:
        raise ExperimentError(f"test evaluation: {exc}") from exc

    lower = upper = None
    skipped = 0
    if spec.bootstrap is not None:
        boot = bootstrap_ci(test_risk, time[test], event[test], spec.bootstrap)
        lower, upper, skipped = boot.lower, boot.upper, boot.skipped
    report = MetricsReport(ci, ibs, int(test.size), lower, upper)
    return ExperimentResult(spec, plan, folds, report, test_risk, fold_test_risks, grid,
                            weights, skipped, _time.perf_counter() - started)


@dataclass
class ComparisonResult:
    label_a: str
    label_b: str
    cs_a: float
    cs_b: float
    deltas: np.ndarray
    p_value: float | None
    controlled: bool
    plan_digest_a: str
    plan_digest_b: str
    side: str = "greater"

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.deltas))

    @property
    def delta_cs(self) -> float:
        return self.cs_a - self.cs_b

    @property
    def k(self) -> int:
        return int(self.deltas.size)

    @property
    def min_p(self) -> float | None:
        return 2.0 ** -self.k if self.controlled else None


def compare_results(a: ExperimentResult, b: ExperimentResult,
                    allow_uncontrolled: bool = False) -> ComparisonResult:
    """Per-fold CS differences (a - b) with an exact sign-flip p-value."""
    da, db = a.plan_digest, b.plan_digest
    controlled = da == db
    if not controlled and not allow_uncontrolled:
        raise NotControlledError("not a controlled comparison: the runs used different fold "
                                 f"plans ({da[:12]} vs {db[:12]})")
    if controlled:
        deltas = np.array([fa.cs - fb.cs for fa, fb in zip(a.folds, b.folds)])
        p = paired_permutation_test(deltas) if deltas.size >= 2 else None
    else:
        deltas = np.array([a.report.cs - b.report.cs])
        p = None
    return ComparisonResult(a.spec.label, b.spec.label, a.report.cs, b.report.cs, deltas, p,
                            controlled, da, db)


def controlled_comparison(spec_a: ExperimentSpec, spec_b: ExperimentSpec, cohort: Cohort,
                          workers: int = 1, allow_uncontrolled: bool = False):
    """Run both specs and compare them on their shared fold plan.

    Returns the comparison and both experiment results.
    """
    a = run_experiment(spec_a, cohort, workers)
    b = run_experiment(spec_b, cohort, workers)
    return compare_results(a, b, allow_uncontrolled), a, b


def fold_ci_summary(result: ExperimentResult) -> tuple[float, float, float, float]:
    """(min, max, mean, std) of per-fold test CI."""
    ci = np.array([f.test_ci for f in result.folds])
    return float(ci.min()), float(ci.max()), float(ci.mean()), float(ci.std())
