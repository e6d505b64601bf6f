"""Command-line driver: generate cohorts, run experiments, compare runs, draw charts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training abort,
5 fold-plan mismatch in a comparison.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .cohort import (CalibrationError, DataError, FoldError, ModalityBlock, load_cohort,
                     save_clinical, save_features, synth_generate)
from .config import ConfigError, load_synth_config, parse_run_config, read_json
from .harness import ExperimentError, NotControlledError, compare_results, run_experiment
from .models import TrainingAborted
from .report import (ComparisonRow, ResultRow, comparison_csv, comparison_text, read_results,
                     render_chart, results_csv, results_text, sort_rows)
from .survival import SurvivalDataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_PLAN = 0, 2, 3, 4, 5
MANIFEST_KIND = "gliofuse-manifest"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _write(path: Path, text: str | bytes) -> None:
    if isinstance(text, str):
        path.write_text(text, encoding="utf-8", newline="\n")
    else:
        path.write_bytes(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Console:
    """Human-readable progress on stderr, silenced by ``--quiet``."""

    def __init__(self, quiet: bool):
        self.quiet = quiet

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)


# ------------------------------------------------------------------- synth

def cmd_synth(args, console: Console) -> int:
    config = load_synth_config(args.config, args.seed)
    try:
        synth = synth_generate(config)
    except CalibrationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = _out_dir(args.out)
    cohort = synth.cohort
    files = {"clinical": out / "clinical.csv"}
    save_clinical(cohort.records, files["clinical"])
    for mid, block in cohort.blocks.items():
        files[mid] = out / f"{mid}.csv"
        save_features(ModalityBlock(mid, block.patient_ids, block.vectors), files[mid])
    truth = io.StringIO()
    writer = csv.writer(truth, lineterminator="\n")
    mids = list(cohort.blocks)
    writer.writerow(["patient_id", "true_risk"] + [f"signal_{m}" for m in mids])
    proj = [synth.projection(m) for m in mids]
    for i, (pid, r) in enumerate(zip(cohort.patient_ids, cohort.risk())):
        writer.writerow([pid, repr(float(r))] + ["" if p[i] != p[i] else repr(float(p[i]))
                                                 for p in proj])
    files["truth"] = out / "truth.csv"
    _write(files["truth"], truth.getvalue())
    manifest = {
        "kind": MANIFEST_KIND,
        "command": "synth",
        "version": __version__,
        "timestamp": _now(),
        "seed": config.seed,
        "config": config.to_dict(),
        "censoring_target": config.censoring,
        "realized_censoring": synth.realized_censoring,
        "censoring_rate": synth.censor_rate,
        "outputs": {name: {"path": p.name, "sha256": sha256_file(p)} for name, p in files.items()},
    }
    _write(out / "manifest.json", _dump_json(manifest))
    console.info(f"wrote {len(cohort)} patients, {len(mids)} modalities to {out} "
                 f"(censoring {synth.realized_censoring:.3f}, target {config.censoring})")
    if args.quiet:
        for p in files.values():
            print(p)
    return EXIT_OK


# --------------------------------------------------------------------- run

def _load_run(path, seed):
    """Parse a run config or a previous run's manifest; returns (RunConfig, expected digests)."""
    doc = read_json(path)
    expected = {}
    base = Path(path).parent
    if isinstance(doc, dict) and doc.get("kind") == MANIFEST_KIND:
        if "config" not in doc or doc.get("command") not in ("run", "compare"):
            raise CliError(EXIT_CONFIG, f"{path}: not a run manifest")
        expected = doc.get("inputs", {})
        seed = doc.get("seed") if seed is None else seed
        configs = doc["config"] if doc["command"] == "compare" else [doc["config"]]
        return [parse_run_config(c, base, str(path), seed) for c in configs], expected
    return [parse_run_config(doc, base, str(path), seed)], expected


def _snapshot(cfg) -> dict:
    """Config as run: absolute data paths and the effective seed."""
    raw = json.loads(json.dumps(cfg.raw))
    raw["seed"] = cfg.seed
    raw["data"] = {"clinical": str(cfg.clinical),
                   "features": {m: str(p) for m, p in cfg.features.items()}}
    return raw


def _inputs(cfg) -> dict[str, str]:
    paths = [cfg.clinical, *cfg.features.values()]
    digests = {}
    for p in paths:
        try:
            digests[str(p)] = sha256_file(p)
        except OSError as exc:
            raise CliError(EXIT_DATA, f"cannot read {p}: {exc.strerror or exc}") from None
    return digests


def _check_inputs(digests: dict, expected: dict) -> None:
    for path, digest in expected.items():
        if path in digests and digests[path] != digest:
            raise CliError(EXIT_DATA, f"{path} changed since the manifest was written "
                                      "(sha256 mismatch)")


def _cohort(cfg):
    try:
        return load_cohort(cfg.clinical, {m: cfg.features[m] for m in sorted(cfg.features)})
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"missing data file: {exc.filename}") from None


def _run_all(cfg, workers, console):
    cohort = _cohort(cfg)
    results = []
    for spec in cfg.experiments:
        console.info(f"running {spec.label} ({spec.strategy}, {spec.k}-fold)")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = run_experiment(spec, cohort, workers)
        for w in caught:
            console.info(f"  warning: {w.message}")
        r = result.report
        console.info(f"  CS {r.cs:.4f}  CI {r.ci:.4f}  IBS {r.ibs:.4f}  n_test {r.n_test}")
        results.append(result)
    return results


def folds_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "fusion", "fold", "best_epoch", "test_ci", "ibs", "cs",
                     "val_ci_trace"])
    for res in results:
        for f in res.folds:
            writer.writerow([res.spec.label, res.spec.fusion, f.fold, f.best_epoch,
                             repr(f.test_ci), repr(f.ibs), repr(f.cs),
                             ";".join(repr(float(v)) for v in f.val_ci_trace)])
    return buf.getvalue()


def late_weights_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "modality", "beta", "beta_normalized", "beta_standardized",
                     "lambda", "degenerate"])
    for res in results:
        w = res.weights
        if w is None:
            continue
        for mid, b, bn, bs in zip(w.modalities, w.beta, w.normalized, w.beta_std):
            writer.writerow([res.spec.label, mid, repr(float(b)), repr(float(bn)),
                             repr(float(bs)), repr(w.lam), int(w.degenerate)])
    return buf.getvalue()


def _write_results(out: Path, results, extra_rows=()) -> list[ResultRow]:
    rows = sort_rows([ResultRow.from_result(r) for r in results] + list(extra_rows))
    _write(out / "results.csv", results_csv(rows))
    _write(out / "results.txt", results_text(rows))
    _write(out / "chart.svg", render_chart(rows))
    _write(out / "folds.csv", folds_csv(results))
    if any(r.weights is not None for r in results):
        _write(out / "late_weights.csv", late_weights_csv(results))
    return rows


def _manifest(command, configs, seed, digests, results, started) -> dict:
    return {
        "kind": MANIFEST_KIND,
        "command": command,
        "version": __version__,
        "timestamp": started,
        "seed": seed,
        "config": configs,
        "inputs": digests,
        "plans": {r.spec.label: r.plan_digest for r in results},
        "bootstrap_skipped": {r.spec.label: r.bootstrap_skipped for r in results},
        "late_fusion": {r.spec.label: {"lambda": r.weights.lam, "cv_folds": r.spec.late_cv_folds,
                                       "standardized": True, "n_lambda": int(r.weights.lambdas.size)}
                        for r in results if r.weights is not None},
        "wall_time": {r.spec.label: round(r.wall_time, 3) for r in results},
    }


def cmd_run(args, console: Console) -> int:
    started = _now()
    configs, expected = _load_run(args.config, args.seed)
    if len(configs) != 1:
        raise CliError(EXIT_CONFIG, f"{args.config}: a comparison manifest cannot be rerun "
                                    "with 'run'; use 'compare'")
    cfg = configs[0]
    digests = _inputs(cfg)
    _check_inputs(digests, expected)
    out = _out_dir(args.out)
    results = _run_all(cfg, args.workers, console)
    rows = _write_results(out, results)
    _write(out / "manifest.json",
           _dump_json(_manifest("run", _snapshot(cfg), cfg.seed, digests, results, started)))
    if args.quiet:
        sys.stdout.write(results_csv(rows))
    else:
        sys.stdout.write(results_text(rows))
    return EXIT_OK


# ----------------------------------------------------------------- compare

def _single(cfg, path) -> None:
    if len(cfg.experiments) != 1:
        raise CliError(EXIT_CONFIG, f"{path}: a comparison config must define exactly one "
                                    f"experiment, found {len(cfg.experiments)}")


def cmd_compare(args, console: Console) -> int:
    started = _now()
    if args.config_b is None:
        configs, expected = _load_run(args.config_a, args.seed)
        if len(configs) != 2:
            raise CliError(EXIT_CONFIG, "compare needs two configs or a comparison manifest")
        sources = [args.config_a, args.config_a]
    else:
        (ca,), ea = _load_run(args.config_a, args.seed)
        (cb,), eb = _load_run(args.config_b, args.seed)
        configs, expected = [ca, cb], {**ea, **eb}
        sources = [args.config_a, args.config_b]
    for cfg, src in zip(configs, sources):
        _single(cfg, src)
    digests = {}
    for cfg in configs:
        digests.update(_inputs(cfg))
    _check_inputs(digests, expected)
    out = _out_dir(args.out)
    a = _run_all(configs[0], args.workers, console)[0]
    b = _run_all(configs[1], args.workers, console)[0]
    try:
        comp = compare_results(a, b, allow_uncontrolled=args.allow_uncontrolled)
    except NotControlledError as exc:
        raise CliError(EXIT_PLAN, f"{exc}. Give the baseline 'restrict_to' the augmented "
                                  "modalities and the same folds, test split and seed.") from None
    rows = [ComparisonRow.from_comparison(comp)]
    _write(out / "comparison.csv", comparison_csv(rows))
    _write(out / "comparison.txt", comparison_text(rows))
    _write_results(out, [a, b])
    manifest = _manifest("compare", [_snapshot(c) for c in configs], configs[0].seed, digests,
                         [a, b], started)
    manifest["comparison"] = {"side": comp.side, "deltas": [float(d) for d in comp.deltas],
                              "mean_delta": comp.mean_delta, "controlled": comp.controlled}
    _write(out / "manifest.json", _dump_json(manifest))
    sys.stdout.write(comparison_csv(rows) if args.quiet else comparison_text(rows))
    return EXIT_OK


# ------------------------------------------------------------------- chart

def cmd_chart(args, console: Console) -> int:
    if not args.results:
        raise CliError(EXIT_CONFIG, "chart needs at least one results CSV")
    try:
        rows = read_results(args.results)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, f"missing results file: {exc.filename}") from None
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    if not rows:
        raise CliError(EXIT_DATA, "results files contain no rows")
    out = Path(args.out)
    if out.suffix.lower() != ".svg":
        out = _out_dir(out) / "chart.svg"
    else:
        _out_dir(out.parent)
    _write(out, render_chart(rows))
    console.info(f"wrote {len(rows)} bars to {out}")
    if args.quiet:
        print(out)
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliofuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=out_default, help="output location")
        p.add_argument("--quiet", action="store_true",
                       help="print only data on stdout and no progress on stderr")

    p = sub.add_parser("synth", help="generate a synthetic censored multimodal cohort")
    p.add_argument("config", nargs="?", default=None, help="generator JSON (defaults if omitted)")
    common(p, "cohort")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the experiments of a config (or rerun a manifest)")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1, help="threads over folds")
    common(p, "results")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="paired comparison of an augmented and a baseline config")
    p.add_argument("config_a", help="augmented configuration (or a comparison manifest)")
    p.add_argument("config_b", nargs="?", default=None, help="baseline configuration")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-uncontrolled", action="store_true",
                   help="report different fold plans as an uncontrolled delta instead of failing")
    common(p, "comparison")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("chart", help="grouped Composite Score bar chart from results CSVs")
    p.add_argument("results", nargs="*")
    common(p, "chart.svg")
    p.set_defaults(func=cmd_chart)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = Console(args.quiet)
    try:
        if getattr(args, "workers", 1) < 1:
            raise CliError(EXIT_CONFIG, "--workers must be >= 1")
        return args.func(args, console)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except TrainingAborted as exc:
        code, msg = EXIT_TRAINING, f"training aborted: {exc}"
    except (DataError, FoldError, ExperimentError, SurvivalDataError) as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"gliofuse {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
