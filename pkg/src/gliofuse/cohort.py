"""Clinical records, per-modality feature blocks, fold plans and a synthetic cohort."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .survival import SurvivalData, concordance_index

SUBTYPES = ("LGG", "GBM", "NA")
CLINICAL_HEADER = ["patient_id", "time_months", "event", "subtype"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class FoldError(ValueError):
    """The requested fold plan cannot be built."""


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    time: float
    event: int
    subtype: str = "NA"

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise DataError(f"{self.patient_id}: time must be > 0, got {self.time}")
        if self.event not in (0, 1):
            raise DataError(f"{self.patient_id}: event must be 0 or 1, got {self.event}")
        if self.subtype not in SUBTYPES:
            raise DataError(f"{self.patient_id}: unknown subtype {self.subtype!r}")


@dataclass(frozen=True)
class ModalityBlock:
    """Feature rows for the patients that have this modality."""

    modality_id: str
    patient_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.patient_ids):
            raise DataError(f"{self.modality_id}: expected {len(self.patient_ids)} feature rows, "
                            f"got array of shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise DataError(f"{self.modality_id}: no feature columns")
        if len(set(self.patient_ids)) != len(self.patient_ids):
            raise DataError(f"{self.modality_id}: duplicate patient ids")
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, patient_ids: Sequence[str]) -> np.ndarray:
        index = {pid: i for i, pid in enumerate(self.patient_ids)}
        try:
            return self.vectors[[index[pid] for pid in patient_ids]]
        except KeyError as exc:
            raise DataError(f"{self.modality_id}: no features for patient {exc.args[0]}") from None

    def restrict(self, patient_ids) -> "ModalityBlock":
        keep = set(patient_ids)
        sel = [i for i, pid in enumerate(self.patient_ids) if pid in keep]
        return ModalityBlock(self.modality_id, tuple(self.patient_ids[i] for i in sel),
                             self.vectors[sel])


@dataclass(frozen=True)
class Cohort:
    records: tuple[ClinicalRecord, ...]
    blocks: Mapping[str, ModalityBlock] = field(default_factory=dict)
    true_risk: Mapping[str, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient ids in clinical records")
        known = set(ids)
        for mid, block in self.blocks.items():
            if block.modality_id != mid:
                raise DataError(f"block keyed {mid!r} carries modality_id {block.modality_id!r}")
            extra = set(block.patient_ids) - known
            if extra:
                raise DataError(f"{mid}: {len(extra)} patient(s) without clinical records, "
                                f"e.g. {sorted(extra)[0]}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    @property
    def time(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=np.float64)

    @property
    def event(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=np.int64)

    @property
    def subtype(self) -> np.ndarray:
        return np.array([r.subtype for r in self.records])

    def survival(self) -> SurvivalData:
        return SurvivalData(self.time, self.event)

    def mask(self, modality_id: str) -> np.ndarray:
        present = set(self._block(modality_id).patient_ids)
        return np.array([pid in present for pid in self.patient_ids])

    def features(self, modality_id: str, index=None) -> np.ndarray:
        ids = self.patient_ids
        if index is not None:
            ids = [ids[i] for i in np.asarray(index)]
        return self._block(modality_id).rows(ids)

    def risk(self) -> np.ndarray:
        if self.true_risk is None:
            raise DataError("cohort carries no ground-truth risk")
        return np.array([self.true_risk[pid] for pid in self.patient_ids])

    def _block(self, modality_id: str) -> ModalityBlock:
        try:
            return self.blocks[modality_id]
        except KeyError:
            raise KeyError(f"unknown modality {modality_id!r}; "
                           f"available: {sorted(self.blocks)}") from None


def intersect(cohort: Cohort, modality_ids: Sequence[str]) -> Cohort:
    """Patients that have every named modality, ordered by patient id."""
    keep = set(cohort.patient_ids)
    for mid in modality_ids:
        keep &= set(cohort._block(mid).patient_ids)
    records = sorted((r for r in cohort.records if r.patient_id in keep),
                     key=lambda r: r.patient_id)
    blocks = {mid: b.restrict(keep) for mid, b in cohort.blocks.items()}
    truth = None
    if cohort.true_risk is not None:
        truth = {pid: cohort.true_risk[pid] for pid in sorted(keep)}
    return Cohort(tuple(records), blocks, truth)


# ------------------------------------------------------------------- files

def load_clinical(path) -> list[ClinicalRecord]:
    path = Path(path)
    records: list[ClinicalRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CLINICAL_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(CLINICAL_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            pid, t, e, sub = (c.strip() for c in row)
            try:
                rec = ClinicalRecord(pid, float(t), int(e), sub or "NA")
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            if pid in seen:
                raise DataError(f"{path}:{line}: duplicate patient id {pid!r}")
            seen.add(pid)
            records.append(rec)
    return records


def save_clinical(records: Sequence[ClinicalRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLINICAL_HEADER)
        for r in records:
            writer.writerow([r.patient_id, repr(float(r.time)), r.event, r.subtype])


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_features(path, modality_id: str) -> ModalityBlock:
    """Read ``patient_id,f0,f1,...`` rows; a ``.meta.json`` sidecar is checked if present."""
    path = Path(path)
    ids: list[str] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "patient_id":
            raise DataError(f"{path}:1: first column must be patient_id")
        dim = len(header) - 1
        if dim < 1:
            raise DataError(f"{path}:1: no feature columns")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataError(f"{path}:{line}: expected {dim + 1} fields, got {len(row)}")
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{line}: non-finite feature value")
            ids.append(row[0].strip())
            rows.append(values)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate patient ids")
    meta = sidecar_path(path)
    if meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        if info.get("dim") != dim or info.get("modality_id") not in (None, modality_id):
            raise DataError(f"{meta}: sidecar disagrees with {path.name} "
                            f"(dim {info.get('dim')}, modality {info.get('modality_id')!r})")
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return ModalityBlock(modality_id, tuple(ids), vectors)


def save_features(block: ModalityBlock, path, stats: "ZScoreStats | None" = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id"] + [f"f{j}" for j in range(block.dim)])
        for pid, row in zip(block.patient_ids, block.vectors):
            writer.writerow([pid] + [repr(float(v)) for v in row])
    meta = {
        "modality_id": block.modality_id,
        "dim": block.dim,
        "normalized": stats is not None,
        "mean": [] if stats is None else stats.mean.tolist(),
        "std": [] if stats is None else stats.std.tolist(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_cohort(clinical_path, feature_paths: Mapping[str, str | Path]) -> Cohort:
    records = load_clinical(clinical_path)
    blocks = {mid: load_features(p, mid) for mid, p in feature_paths.items()}
    return Cohort(tuple(records), blocks)


# ------------------------------------------------------------ normalization

@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    convention: str = "population"

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def zscore_fit_apply(train, *others, floor: float = 1e-8):
    """Standardize with mean and population std of ``train``; std below ``floor``
    becomes 1 so constant features map to 0.

    Returns the normalized ``train``, each normalized ``other`` and the stats.
    """
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise DataError("z-score needs a non-empty 2-D training block")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std < floor, 1.0, std)
    stats = ZScoreStats(mean, std)
    return (stats.apply(train), *(stats.apply(o) for o in others), stats)


# -------------------------------------------------------------------- folds

def stratified_assign(strata: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Deal each stratum's shuffled members round-robin into ``k`` folds."""
    fold = np.empty(strata.size, dtype=np.int64)
    pos = 0
    for level in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == level))
        fold[members] = (pos + np.arange(members.size)) % k
        pos += members.size
    return fold


def _largest_remainder(sizes: np.ndarray, total: int) -> np.ndarray:
    exact = sizes * total / sizes.sum()
    alloc = np.floor(exact).astype(np.int64)
    for i in np.argsort(-(exact - alloc), kind="stable")[: total - alloc.sum()]:
        alloc[i] += 1
    return alloc


@dataclass(frozen=True)
class FoldPlan:
    """Held-out test indices plus ``k`` train/validation splits of the rest.

    Indices refer to positions in ``patient_ids``.
    """

    k: int
    seed: int
    patient_ids: tuple[str, ...]
    test: np.ndarray
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def train(self) -> np.ndarray:
        return np.setdiff1d(np.arange(len(self.patient_ids)), self.test)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"k={self.k};seed={self.seed}\n".encode())
        h.update(("test:" + ",".join(self.patient_ids[i] for i in self.test) + "\n").encode())
        for tr, va in self.folds:
            h.update(("val:" + ",".join(self.patient_ids[i] for i in va) + "\n").encode())
        return h.hexdigest()


def make_folds(cohort: Cohort, k: int, test_fraction: float = 0.2, seed: int = 0,
               n_test: int | None = None, stratify: str = "event") -> FoldPlan:
    """Event-stratified held-out test split and ``k`` validation folds.

    ``n_test`` overrides ``test_fraction``. ``stratify="subtype"`` stratifies
    on (event, subtype) instead of event alone.
    """
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    n = len(cohort)
    event = cohort.event
    if stratify == "event":
        strata = event.astype(str)
    elif stratify == "subtype":
        strata = np.char.add(event.astype(str), cohort.subtype.astype(str))
    else:
        raise FoldError(f"unknown stratification {stratify!r}")
    if n_test is None:
        if not 0.0 <= test_fraction < 1.0:
            raise FoldError(f"test_fraction must lie in [0, 1), got {test_fraction}")
        n_test = int(round(test_fraction * n))
    if not 0 <= n_test < n:
        raise FoldError(f"cannot hold out {n_test} of {n} patients")

    rng = np.random.default_rng(seed)
    levels, sizes = np.unique(strata, return_counts=True)
    take = _largest_remainder(sizes, n_test) if n_test else np.zeros(levels.size, np.int64)
    test = []
    for level, m in zip(levels, take):
        members = rng.permutation(np.flatnonzero(strata == level))
        test.extend(members[:m].tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    rest = np.setdiff1d(np.arange(n), test)
    if event[rest].sum() < k:
        raise FoldError(f"only {int(event[rest].sum())} training events for {k} folds; "
                        "every validation fold needs at least one")
    assign = stratified_assign(strata[rest], k, rng)
    folds = []
    for f in range(k):
        va = rest[assign == f]
        tr = rest[assign != f]
        if not event[tr].any():
            raise FoldError(f"fold {f} has no training events")
        folds.append((tr, va))
    return FoldPlan(k, seed, tuple(cohort.patient_ids), test, tuple(folds))


def aggregate_instances(instance_scores: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Mean instance (e.g. patch) score per patient."""
    out = {}
    for pid, scores in instance_scores.items():
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if scores.size == 0:
            raise DataError(f"patient {pid!r} has no instance scores")
        out[pid] = float(scores.mean())
    return out


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. The defaults mimic the glioma cohort's censoring rate
    and subtype mix at desk scale."""

    n: int = 600
    modalities: tuple[str, ...] = ("ffpe", "rna", "mri")
    dims: tuple[int, ...] = (16, 16, 16)
    weights: tuple[float, ...] = (1.0, 1.6, 0.5)
    availability: tuple[float, ...] = (1.0, 1.0, 1.0)
    gbm_fraction: float = 0.358
    subtype_hazard: float = 2.0
    baseline_hazard: float = 1.0 / 30.0
    censoring: float = 0.596
    seed: int = 0

    def __post_init__(self):
        m = len(self.modalities)
        for name in ("dims", "weights", "availability"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != m:
                raise ValueError(f"{name} needs one entry per modality ({m}), got {len(value)}")
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if any(d < 1 for d in self.dims):
            raise ValueError("every modality dim must be >= 1")
        if any(not 0.0 < a <= 1.0 for a in self.availability):
            raise ValueError("availability fractions must lie in (0, 1]")
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError("censoring fraction must lie in [0, 1)")
        if not 0.0 <= self.gbm_fraction <= 1.0:
            raise ValueError("gbm_fraction must lie in [0, 1]")
        if self.subtype_hazard <= 0 or self.baseline_hazard <= 0:
            raise ValueError("hazard parameters must be > 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config field(s): {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {name: (list(v) if isinstance(v, tuple) else v)
                for name, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthCohort:
    cohort: Cohort
    directions: dict[str, np.ndarray]
    censor_rate: float
    realized_censoring: float
    config: SynthConfig

    def projection(self, modality_id: str) -> np.ndarray:
        """Each patient's signal projection u_m . f_m (NaN where the modality is missing)."""
        block = self.cohort.blocks[modality_id]
        proj = dict(zip(block.patient_ids, block.vectors @ self.directions[modality_id]))
        return np.array([proj.get(pid, np.nan) for pid in self.cohort.patient_ids])


def _calibrate_censoring(event_time, unit_exp, target, max_iter: int = 60):
    """Exponential censoring rate whose realized censored fraction is closest to target."""
    if target == 0.0:
        return 0.0, 0.0

    def frac(rate):
        return float(np.mean(unit_exp / rate < event_time))

    lo, hi = -30.0, 30.0  # bounds on log(rate)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = frac(math.exp(mid))
        if best is None or abs(f - target) < abs(best[1] - target):
            best = (math.exp(mid), f)
        if f < target:
            lo = mid
        else:
            hi = mid
    rate, realized = best
    if abs(realized - target) > 0.03:
        raise CalibrationError(f"censoring target {target} unreachable; best {realized:.3f}")
    return rate, realized


def synth_generate(config: SynthConfig) -> SynthCohort:
    """Draw a censored cohort whose log-risk is a weighted sum of per-modality
    signal projections plus a GBM subtype effect."""
    ss = np.random.SeedSequence(config.seed)
    rng_dir, rng_feat, rng_sub, rng_time, rng_cens, rng_mask = (
        np.random.default_rng(s) for s in ss.spawn(6))
    n = config.n
    ids = [f"S{i:05d}" for i in range(n)]
    gbm = rng_sub.random(n) < config.gbm_fraction
    risk = np.where(gbm, math.log(config.subtype_hazard), 0.0)
    directions, features = {}, {}
    for mid, dim, w in zip(config.modalities, config.dims, config.weights):
        u = rng_dir.standard_normal(dim)
        u /= np.linalg.norm(u)
        f = rng_feat.standard_normal((n, dim))
        directions[mid] = u
        features[mid] = f
        risk = risk + w * (f @ u)
    event_time = rng_time.exponential(1.0, n) / (config.baseline_hazard * np.exp(risk))
    event_time = np.maximum(event_time, 1e-6)
    unit_exp = rng_cens.exponential(1.0, n)
    rate, realized = _calibrate_censoring(event_time, unit_exp, config.censoring)
    if rate == 0.0:
        time, event = event_time, np.ones(n, dtype=np.int64)
    else:
        censor_time = np.maximum(unit_exp / rate, 1e-6)
        event = (event_time <= censor_time).astype(np.int64)
        time = np.minimum(event_time, censor_time)
    records = tuple(ClinicalRecord(pid, float(t), int(e), "GBM" if g else "LGG")
                    for pid, t, e, g in zip(ids, time, event, gbm))
    blocks = {}
    for mid, avail in zip(config.modalities, config.availability):
        keep = np.ones(n, dtype=bool) if avail >= 1.0 else rng_mask.random(n) < avail
        sel = np.flatnonzero(keep)
        blocks[mid] = ModalityBlock(mid, tuple(ids[i] for i in sel), features[mid][sel])
    cohort = Cohort(records, blocks, dict(zip(ids, risk.tolist())))
    return SynthCohort(cohort, directions, rate, 1.0 - float(event.mean()), config)


def oracle_concordance(synth: SynthCohort, modality_id: str | None = None) -> float:
    """CI of the true risk, or of one modality's true projection, against outcomes."""
    cohort = synth.cohort
    score = cohort.risk() if modality_id is None else synth.projection(modality_id)
    ok = np.isfinite(score)
    return concordance_index(score[ok], cohort.time[ok], cohort.event[ok])
