import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliofuse.cohort import (CalibrationError, ClinicalRecord, Cohort, DataError, FoldError,
                             ModalityBlock, SynthConfig, aggregate_instances, intersect,
                             load_clinical, load_cohort, load_features, make_folds,
                             oracle_concordance, save_clinical, save_features, sidecar_path,
                             stratified_assign, synth_generate, zscore_fit_apply)


def _cohort(n=40, seed=0, missing=()):
    rng = np.random.default_rng(seed)
    ids = [f"P{i:03d}" for i in range(n)]
    records = tuple(ClinicalRecord(pid, float(rng.uniform(1, 60)), int(rng.random() < 0.5),
                                   "GBM" if i % 3 == 0 else "LGG") for i, pid in enumerate(ids))
    keep = [pid for pid in ids if pid not in missing]
    blocks = {"a": ModalityBlock("a", tuple(ids), rng.normal(size=(n, 3))),
              "b": ModalityBlock("b", tuple(keep), rng.normal(size=(len(keep), 2)))}
    return Cohort(records, blocks)


def test_clinical_round_trip(tmp_path):
    cohort = _cohort()
    path = tmp_path / "clinical.csv"
    save_clinical(cohort.records, path)
    assert tuple(load_clinical(path)) == cohort.records


@pytest.mark.parametrize("body, message", [
    ("patient_id,time,event,subtype\n", "expected header"),
    ("patient_id,time_months,event,subtype\nA,1.0,1\n", ":2: expected 4 fields"),
    ("patient_id,time_months,event,subtype\nA,-1.0,1,LGG\n", ":2:"),
    ("patient_id,time_months,event,subtype\nA,1.0,2,LGG\n", ":2:"),
    ("patient_id,time_months,event,subtype\nA,1.0,1,XYZ\n", ":2:"),
    ("patient_id,time_months,event,subtype\nA,1.0,1,LGG\nA,2.0,0,GBM\n", ":3: duplicate"),
])
def test_clinical_errors_carry_line_numbers(tmp_path, body, message):
    path = tmp_path / "c.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=message):
        load_clinical(path)


def test_features_round_trip_and_sidecar(tmp_path):
    block = ModalityBlock("rna", ("A", "B"), np.array([[0.1, 1e-17], [3.0, -2.5]]))
    path = tmp_path / "rna.csv"
    save_features(block, path)
    loaded = load_features(path, "rna")
    assert loaded.patient_ids == block.patient_ids
    assert np.array_equal(loaded.vectors, block.vectors)
    meta = json.loads(sidecar_path(path).read_text())
    assert meta == {"modality_id": "rna", "dim": 2, "normalized": False, "mean": [], "std": []}
    with pytest.raises(DataError, match="sidecar"):
        load_features(path, "mri")


def test_features_errors(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("patient_id,f0\nA,1.0\nB,nan\n")
    with pytest.raises(DataError, match=":3: non-finite"):
        load_features(path, "x")
    path.write_text("id,f0\nA,1.0\n")
    with pytest.raises(DataError, match="patient_id"):
        load_features(path, "x")


def test_load_cohort_rejects_unknown_patients(tmp_path):
    save_clinical([ClinicalRecord("A", 1.0, 1, "LGG")], tmp_path / "c.csv")
    save_features(ModalityBlock("a", ("A", "Z"), np.zeros((2, 1))), tmp_path / "a.csv")
    with pytest.raises(DataError, match="without clinical records"):
        load_cohort(tmp_path / "c.csv", {"a": tmp_path / "a.csv"})


def test_intersect_keeps_shared_patients_sorted():
    cohort = _cohort(missing={"P003", "P010"})
    sub = intersect(cohort, ["a", "b"])
    assert len(sub) == 38 and "P003" not in sub.patient_ids
    assert sub.patient_ids == sorted(sub.patient_ids)
    assert sub.features("b").shape == (38, 2)
    with pytest.raises(KeyError, match="unknown modality"):
        intersect(cohort, ["mri"])


def test_zscore_uses_training_statistics_only():
    train = np.array([[1.0, 5.0], [3.0, 5.0]])
    test = np.array([[5.0, 7.0]])
    tr, te, stats = zscore_fit_apply(train, test)
    assert np.allclose(tr, [[-1.0, 0.0], [1.0, 0.0]])
    assert np.allclose(te, [[3.0, 2.0]])  # constant column: std floored to 1
    assert stats.convention == "population"


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 120), st.integers(2, 6), st.integers(0, 10_000))
def test_folds_partition_and_stratify(n, k, seed):
    cohort = _cohort(n, seed)
    if cohort.event.sum() - round(0.2 * n) < k + 2:
        return
    try:
        plan = make_folds(cohort, k, 0.2, seed)
    except FoldError:
        return
    rest = plan.train
    assert np.intersect1d(plan.test, rest).size == 0
    assert plan.test.size == round(0.2 * n)
    vals = np.concatenate([va for _, va in plan.folds])
    assert np.array_equal(np.sort(vals), rest)
    for tr, va in plan.folds:
        assert np.intersect1d(tr, va).size == 0 and tr.size + va.size == rest.size
    events = [int(cohort.event[va].sum()) for _, va in plan.folds]
    assert max(events) - min(events) <= 1


def test_fold_plan_is_deterministic_and_seed_sensitive():
    cohort = _cohort(60)
    a, b = make_folds(cohort, 5, seed=3), make_folds(cohort, 5, seed=3)
    assert a.digest() == b.digest()
    assert make_folds(cohort, 5, seed=4).digest() != a.digest()
    assert make_folds(cohort, 5, n_test=19, seed=3).test.size == 19


def test_fold_errors():
    cohort = _cohort(20)
    with pytest.raises(FoldError):
        make_folds(cohort, 1)
    with pytest.raises(FoldError):
        make_folds(cohort, 5, n_test=20)
    few = Cohort(tuple(ClinicalRecord(f"P{i}", float(i + 1), int(i < 2), "LGG") for i in range(12)))
    with pytest.raises(FoldError, match="training events"):
        make_folds(few, 5, n_test=2)


def test_stratified_assign_balances_each_stratum():
    strata = np.array([0] * 13 + [1] * 7)
    fold = stratified_assign(strata, 4, np.random.default_rng(0))
    counts = [np.bincount(fold[strata == s], minlength=4) for s in (0, 1)]
    assert all(c.max() - c.min() <= 1 for c in counts)


def test_aggregate_instances_means_per_patient():
    assert aggregate_instances({"A": [1.0, 2.0, 6.0], "B": [0.5]}) == {"A": 3.0, "B": 0.5}
    with pytest.raises(DataError):
        aggregate_instances({"A": []})


def test_synth_is_seeded_and_calibrated():
    cfg = SynthConfig(n=300, seed=5)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert a.cohort.records == b.cohort.records
    assert np.array_equal(a.cohort.blocks["rna"].vectors, b.cohort.blocks["rna"].vectors)
    assert abs(a.realized_censoring - 0.596) <= 0.03
    assert synth_generate(SynthConfig(n=300, seed=6)).cohort.records != a.cohort.records
    for u in a.directions.values():
        assert np.linalg.norm(u) == pytest.approx(1.0)


def test_synth_signal_ordering_follows_weights():
    synth = synth_generate(SynthConfig(n=2000, seed=1))
    ci = {m: oracle_concordance(synth, m) for m in ("ffpe", "rna", "mri")}
    assert ci["rna"] > ci["ffpe"] > ci["mri"] > 0.5
    assert oracle_concordance(synth) > ci["rna"]


def test_synth_availability_and_config_validation():
    synth = synth_generate(SynthConfig(n=400, availability=(1.0, 1.0, 0.3), seed=2))
    assert 80 < len(synth.cohort.blocks["mri"].patient_ids) < 160
    assert np.isnan(synth.projection("mri")).sum() == 400 - len(synth.cohort.blocks["mri"].patient_ids)
    with pytest.raises(ValueError):
        SynthConfig(dims=(4, 4))
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})
    assert SynthConfig.from_dict(SynthConfig().to_dict()) == SynthConfig()
    with pytest.raises(CalibrationError):
        synth_generate(SynthConfig(n=5, censoring=0.5, seed=0))
