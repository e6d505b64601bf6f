import json
import subprocess
import sys

import pytest

from gliofuse.cli import main
from gliofuse.report import parse_comparison_csv, parse_results_csv


def _config(root, experiments, **defaults):
    doc = {"schema_version": 1, "seed": 2,
           "data": {"clinical": "cohort/clinical.csv",
                    "features": {m: f"cohort/{m}.csv" for m in ("ffpe", "rna", "mri")}},
           "defaults": {"folds": 3, "head": {"hidden": 8, "attention_dim": 4},
                        "train": {"epochs": 8, "head_lr": 0.01, "patience": 4},
                        "bootstrap": {"resamples": 200}, **defaults},
           "experiments": experiments}
    return doc


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "s.json").write_text(json.dumps({"schema_version": 1, "n": 150, "seed": 1}))
    assert main(["synth", str(root / "s.json"), "--out", str(root / "cohort"), "--quiet"]) == 0
    return root


def test_synth_outputs_and_manifest(workspace, tmp_path, capsys):
    files = sorted(p.name for p in (workspace / "cohort").iterdir())
    assert files == ["clinical.csv", "ffpe.csv", "ffpe.meta.json", "manifest.json", "mri.csv",
                     "mri.meta.json", "rna.csv", "rna.meta.json", "truth.csv"]
    manifest = json.loads((workspace / "cohort" / "manifest.json").read_text())
    assert manifest["censoring_target"] == 0.596
    assert abs(manifest["realized_censoring"] - 0.596) <= 0.03
    # same seed: byte-identical cohort files
    assert main(["synth", str(workspace / "s.json"), "--out", str(tmp_path), "--quiet"]) == 0
    for name in ("clinical.csv", "rna.csv", "truth.csv"):
        assert (tmp_path / name).read_bytes() == (workspace / "cohort" / name).read_bytes()
    capsys.readouterr()
    assert main(["synth", str(workspace / "s.json"), "--out", str(tmp_path / "x"), "--seed", "9",
                 "--quiet"]) == 0
    assert (tmp_path / "x" / "clinical.csv").read_bytes() != (tmp_path / "clinical.csv").read_bytes()


def test_run_quiet_stdout_is_the_results_csv(workspace, capsys):
    cfg = _write(workspace / "run.json", _config(workspace, [
        {"modalities": ["rna"], "fusion": "unimodal"},
        {"modalities": ["ffpe", "rna"], "fusion": "late"},
        {"modalities": ["ffpe", "rna", "mri"], "fusion": "early", "n_test": 19}]))
    capsys.readouterr()
    assert main(["run", cfg, "--out", str(workspace / "res"), "--quiet"]) == 0
    out, err = capsys.readouterr()
    assert err == ""
    rows = parse_results_csv(out)
    assert out == (workspace / "res" / "results.csv").read_text()
    assert [r.small_n for r in rows] == [False, False, True]
    for name in ("results.txt", "chart.svg", "folds.csv", "late_weights.csv", "manifest.json"):
        assert (workspace / "res" / name).exists()
    manifest = json.loads((workspace / "res" / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {str((workspace / "cohort" / f).resolve()) for f in
                                       ("clinical.csv", "ffpe.csv", "rna.csv", "mri.csv")}
    assert manifest["seed"] == 2 and "FFPE+RNA" in manifest["late_fusion"]


def test_rerun_from_manifest_is_byte_identical(workspace, capsys):
    cfg = _write(workspace / "det.json", _config(workspace, [
        {"modalities": ["ffpe", "rna"], "fusion": "early"},
        {"modalities": ["rna", "mri"], "fusion": "gated", "n_test": 19}]))
    assert main(["run", cfg, "--out", str(workspace / "d1"), "--quiet"]) == 0
    assert main(["run", str(workspace / "d1" / "manifest.json"), "--out", str(workspace / "d2"),
                 "--workers", "3", "--quiet"]) == 0
    for name in ("results.csv", "chart.svg", "folds.csv"):
        assert (workspace / "d1" / name).read_bytes() == (workspace / "d2" / name).read_bytes()


def test_rerun_detects_changed_inputs(workspace, tmp_path, capsys):
    manifest = json.loads((workspace / "res" / "manifest.json").read_text())
    key = next(iter(manifest["inputs"]))
    manifest["inputs"][key] = "0" * 64
    path = _write(tmp_path / "m.json", manifest)
    assert main(["run", path, "--out", str(tmp_path / "o")]) == 3
    assert "sha256 mismatch" in capsys.readouterr().err


def test_compare_controlled_self_and_mismatch(workspace, capsys):
    tri = {"modalities": ["ffpe", "rna", "mri"], "fusion": "early", "n_test": 19, "folds": 5}
    bi = {"modalities": ["ffpe", "rna"], "fusion": "early", "n_test": 19, "folds": 5,
          "restrict_to": ["mri"]}
    a = _write(workspace / "a.json", _config(workspace, [tri]))
    b = _write(workspace / "b.json", _config(workspace, [bi]))
    c = _write(workspace / "c.json", _config(workspace, [{**bi, "folds": 4}]))
    capsys.readouterr()
    assert main(["compare", a, b, "--out", str(workspace / "cmp"), "--quiet"]) == 0
    (row,) = parse_comparison_csv(capsys.readouterr().out)
    assert row.note == "Controlled" and row.baseline == "FFPE+RNA†" and row.min_p == 0.03125
    assert main(["compare", a, a, "--out", str(workspace / "self"), "--quiet"]) == 0
    (row,) = parse_comparison_csv(capsys.readouterr().out)
    assert row.delta_cs == 0.0 and row.p_value == 1.0
    assert "ΔCS" in (workspace / "self" / "comparison.txt").read_text()
    assert main(["compare", a, c, "--out", str(workspace / "bad"), "--quiet"]) == 5
    captured = capsys.readouterr()
    assert captured.out == "" and "not a controlled comparison" in captured.err


def test_exit_codes(workspace, tmp_path, capsys):
    bad = _config(workspace, [{"modalities": ["rna"], "fusion": "unimodal", "folds": 1}])
    assert main(["run", _write(tmp_path / "bad.json", bad), "--out", str(tmp_path)]) == 2
    assert "experiments/0/folds" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    missing = _config(workspace, [{"modalities": ["rna"], "fusion": "unimodal"}])
    missing["data"]["clinical"] = "cohort/nope.csv"
    assert main(["run", _write(workspace / "miss.json", missing), "--out", str(tmp_path)]) == 3
    boom = _config(workspace, [{"modalities": ["ffpe", "rna"], "fusion": "early",
                                "train": {"head_lr": 1e300}}])
    assert main(["run", _write(workspace / "boom.json", boom), "--out", str(tmp_path)]) == 4
    assert "training aborted" in capsys.readouterr().err
    huge = _config(workspace, [{"modalities": ["rna"], "fusion": "unimodal", "n_test": 150}])
    assert main(["run", _write(workspace / "huge.json", huge), "--out", str(tmp_path)]) == 3
    assert "cannot hold out" in capsys.readouterr().err
    blocked = tmp_path / "file"
    blocked.write_text("")
    assert main(["synth", "--out", str(blocked / "sub")]) == 3


def test_chart_command(workspace, tmp_path, capsys):
    res = str(workspace / "res" / "results.csv")
    assert main(["chart", res, res, "--out", str(tmp_path / "c.svg"), "--quiet"]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_bytes().count(b'id="bar-') == 6
    assert main(["chart", "--out", str(tmp_path / "e.svg")]) == 2
    assert main(["chart", str(tmp_path / "none.csv"), "--out", str(tmp_path / "e.svg")]) == 3
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n")
    assert main(["chart", str(junk), "--out", str(tmp_path / "e.svg")]) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gliofuse.cli", "run", str(tmp_path / "nope.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == "" and "no such config file" in proc.stderr
