"""Results tables (CSV and aligned text) and the grouped Composite Score bar chart."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from matplotlib.patches import Patch

from .survival import composite_score

RESULTS_HEADER = ["model", "fusion", "test_cs", "test_ci", "ibs", "ci_lower", "ci_upper",
                  "n_test", "small_n"]
COMPARISON_HEADER = ["baseline", "baseline_cs", "augmented", "augmented_cs", "delta_cs",
                     "note", "p_value", "min_p", "folds"]
SMALL_N_MARK = "‡"
CONTROLLED_MARK = "†"
SECTIONS = ("Unimodal", "Bimodal", "Trimodal", "Controlled Comparison")

FUSION_ORDER = ("none", "early", "late", "joint", "bilinear", "cross_attention", "gated")
FUSION_COLORS = {
    "none": "#7f7f7f",
    "early": "#1f77b4",
    "late": "#ff7f0e",
    "joint": "#2ca02c",
    "bilinear": "#9467bd",
    "cross_attention": "#8c564b",
    "gated": "#e377c2",
}


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _parse_opt(s: str) -> float | None:
    return None if s == "" else float(s)


@dataclass(frozen=True)
class ResultRow:
    model: str
    fusion: str
    test_cs: float
    test_ci: float
    ibs: float
    ci_lower: float | None
    ci_upper: float | None
    n_test: int
    small_n: bool

    @classmethod
    def from_result(cls, result) -> "ResultRow":
        r = result.report
        return cls(result.spec.label, result.spec.fusion, r.cs, r.ci, r.ibs, r.ci_lower,
                   r.ci_upper, r.n_test, r.small_n)

    @property
    def section(self) -> str:
        if CONTROLLED_MARK in self.model:
            return SECTIONS[3]
        count = self.model.count("+") + 1
        return SECTIONS[min(count, 3) - 1]


def sort_rows(rows: Iterable[ResultRow]) -> list[ResultRow]:
    """Unimodal, bimodal, trimodal, then controlled rows; stable within a section."""
    return sorted(rows, key=lambda r: SECTIONS.index(r.section))


def results_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for r in rows:
        writer.writerow([r.model, r.fusion, _fmt(r.test_cs), _fmt(r.test_ci), _fmt(r.ibs),
                         _fmt(r.ci_lower), _fmt(r.ci_upper), r.n_test,
                         SMALL_N_MARK if r.small_n else ""])
    return buf.getvalue()


def parse_results_csv(text: str) -> list[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != RESULTS_HEADER:
        raise ValueError(f"expected results header {','.join(RESULTS_HEADER)}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(RESULTS_HEADER):
            raise ValueError(f"line {line}: expected {len(RESULTS_HEADER)} fields")
        model, fusion, cs, ci, ibs, lo, hi, n, small = rec
        if small not in ("", SMALL_N_MARK):
            raise ValueError(f"line {line}: small_n must be empty or {SMALL_N_MARK!r}")
        rows.append(ResultRow(model, fusion, float(cs), float(ci), float(ibs), _parse_opt(lo),
                              _parse_opt(hi), int(n), small == SMALL_N_MARK))
    return rows


def read_results(paths: Iterable) -> list[ResultRow]:
    rows = []
    for p in paths:
        rows.extend(parse_results_csv(Path(p).read_text(encoding="utf-8")))
    return rows


def check_cs_identity(row: ResultRow) -> bool:
    return row.test_cs == composite_score(row.test_ci, row.ibs)


def results_text(rows: Sequence[ResultRow]) -> str:
    """Aligned table grouped into unimodal / bimodal / trimodal / controlled sections."""
    head = ["Model", "Fusion", "Test CS", "CI", "IBS", "95% CI (boot)", "n"]
    body: list[list[str] | str] = []
    current = None
    for r in sort_rows(rows):
        if r.section != current:
            current = r.section
            body.append(current)
        interval = "" if r.ci_lower is None else f"[{r.ci_lower:.3f}, {r.ci_upper:.3f}]"
        cs = f"{r.test_cs:.3f}" + (SMALL_N_MARK if r.small_n else "")
        body.append([r.model, "-" if r.fusion == "none" else r.fusion, cs, f"{r.test_ci:.3f}",
                     f"{r.ibs:.3f}", interval, str(r.n_test)])
    cells = [head] + [b for b in body if isinstance(b, list)]
    widths = [max(len(c[i]) for c in cells) for i in range(len(head))]

    def line(c):
        return "  ".join(x.ljust(w) for x, w in zip(c, widths)).rstrip()

    out = [line(head), "  ".join("-" * w for w in widths)]
    for b in body:
        out.append(b if isinstance(b, str) else line(b))
    notes = []
    if any(CONTROLLED_MARK in r.model for r in rows):
        notes.append(f"{CONTROLLED_MARK} restricted to the patient set of the larger modality set.")
    if any(r.small_n for r in rows):
        notes.append(f"{SMALL_N_MARK} CS approximate (n <= 25 test); IBS component imprecise.")
    return "\n".join(out + notes) + "\n"


@dataclass(frozen=True)
class ComparisonRow:
    baseline: str
    baseline_cs: float
    augmented: str
    augmented_cs: float
    delta_cs: float
    note: str
    p_value: float | None
    min_p: float | None
    folds: int

    @classmethod
    def from_comparison(cls, comp) -> "ComparisonRow":
        return cls(comp.label_b, comp.cs_b, comp.label_a, comp.cs_a, comp.delta_cs,
                   "Controlled" if comp.controlled else "Uncontrolled", comp.p_value,
                   comp.min_p, comp.k if comp.controlled else 0)


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_HEADER)
    for r in rows:
        writer.writerow([r.baseline, _fmt(r.baseline_cs), r.augmented, _fmt(r.augmented_cs),
                         _fmt(r.delta_cs), r.note, _fmt(r.p_value), _fmt(r.min_p), r.folds])
    return buf.getvalue()


def parse_comparison_csv(text: str) -> list[ComparisonRow]:
    reader = csv.reader(io.StringIO(text))
    if next(reader, None) != COMPARISON_HEADER:
        raise ValueError("unexpected comparison header")
    return [ComparisonRow(b, float(bcs), a, float(acs), float(d), note, _parse_opt(p),
                          _parse_opt(mp), int(k))
            for b, bcs, a, acs, d, note, p, mp, k in (r for r in reader if r)]


def comparison_text(rows: Sequence[ComparisonRow]) -> str:
    head = ["Baseline", "+ Added", "ΔCS", "Note", "p (perm.)", "min p"]
    cells = [head]
    for r in rows:
        cells.append([f"{r.baseline} ({r.baseline_cs:.3f})", f"{r.augmented} ({r.augmented_cs:.3f})",
                      f"{r.delta_cs:+.3f}", r.note,
                      "" if r.p_value is None else f"{r.p_value:.3f}",
                      "" if r.min_p is None else f"{r.min_p:.3f}"])
    widths = [max(len(c[i]) for c in cells) for i in range(len(head))]
    lines = ["  ".join(x.ljust(w) for x, w in zip(c, widths)).rstrip() for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- chart

def chart_groups(rows: Sequence[ResultRow]) -> list[tuple[str, list[ResultRow]]]:
    """Bars grouped by modality combination, in table order."""
    groups: dict[str, list[ResultRow]] = {}
    for r in sort_rows(rows):
        groups.setdefault(r.model, []).append(r)
    return [(model, sorted(rs, key=lambda r: _fusion_rank(r.fusion))) for model, rs in groups.items()]


def _fusion_rank(fusion: str) -> int:
    return FUSION_ORDER.index(fusion) if fusion in FUSION_ORDER else len(FUSION_ORDER)


def render_chart(rows: Sequence[ResultRow], title: str = "Composite Score by configuration") -> bytes:
    """Grouped bar chart of test CS as SVG bytes.

    Each bar carries the id ``bar-<group>-<slot>``; small-n bars are hatched.
    Styling is fixed so identical rows give identical bytes.
    """
    if not rows:
        raise ValueError("no result rows to chart")
    groups = chart_groups(rows)
    width = 0.8
    with matplotlib.rc_context({"svg.hashsalt": "gliofuse", "svg.fonttype": "none",
                                "font.family": "DejaVu Sans", "hatch.linewidth": 0.8}):
        fig = Figure(figsize=(max(6.0, 1.2 * len(groups) + 2), 4.2))
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        seen_fusions = []
        for gi, (model, members) in enumerate(groups):
            bw = width / len(members)
            for si, r in enumerate(members):
                x = gi - width / 2 + bw * (si + 0.5)
                color = FUSION_COLORS.get(r.fusion, "#17becf")
                (bar,) = ax.bar([x], [r.test_cs], width=bw * 0.92, color=color,
                                edgecolor="black", linewidth=0.6,
                                hatch="///" if r.small_n else None)
                bar.set_gid(f"bar-{gi}-{si}")
                ax.text(x, r.test_cs + 0.01, f"{r.test_cs:.3f}", ha="center", va="bottom",
                        fontsize=6, rotation=90)
                if r.fusion not in seen_fusions:
                    seen_fusions.append(r.fusion)
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels([g[0] for g in groups], rotation=20, ha="right", fontsize=8)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlim(-0.6, len(groups) - 0.4)
        ax.set_ylabel("Test Composite Score (CS)")
        ax.set_title(title, fontsize=10)
        handles = [Patch(facecolor=FUSION_COLORS.get(f, "#17becf"), edgecolor="black",
                         label="unimodal" if f == "none" else f.replace("_", " "))
                   for f in sorted(seen_fusions, key=_fusion_rank)]
        if any(r.small_n for r in rows):
            handles.append(Patch(facecolor="white", edgecolor="black", hatch="///",
                                 label=f"{SMALL_N_MARK} n ≤ 25 test"))
        ax.legend(handles=handles, fontsize=7, loc="upper left", ncol=2, frameon=False)
        ax.grid(axis="y", linewidth=0.3, alpha=0.5)
        ax.set_axisbelow(True)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def write_chart(rows: Sequence[ResultRow], path) -> Path:
    path = Path(path)
    path.write_bytes(render_chart(rows))
    return path


def finite_or_none(x) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)
