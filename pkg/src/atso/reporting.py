"""Report artifacts: per-run CSV rows, sweep aggregation and the rendered
table layouts. All emission is deterministic: rows are sorted, raw CSV keeps
full float precision via repr, layout tables format scores as percentages
with two decimals."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .metrics import CROSS_EVAL_HEADER
from .orchestrator import RunReport

LAYOUTS = ("table1", "appendixA", "table3", "csv", "json")


class ReportError(ValueError):
    pass


def run_rows(report: RunReport, metric_name: str) -> list[dict]:
    """Flatten a run into (generation, mode, split, metric, value) rows."""
    rows = []
    for rep in report.reports:
        gen = "final" if rep.phase == "final" else str(rep.t)
        for key in sorted(rep.scores):
            if key == "global_dsc":
                split, metric = "test", "global_dsc"
            else:
                split, metric = key, metric_name
            rows.append({"generation": gen, "mode": rep.mode, "split": split,
                         "metric": metric, "value": rep.scores[key]})
    return rows


def generations_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generation", "mode", "split", "metric", "value"])
    for r in rows:
        w.writerow([r["generation"], r["mode"], r["split"], r["metric"],
                    repr(float(r["value"]))])
    return buf.getvalue()


def cross_eval_rows(report: RunReport) -> list[dict]:
    out = []
    for m in report.matrices:
        row = dict(zip(CROSS_EVAL_HEADER, [m.generation] + m.row()))
        out.append(row)
    return out


@dataclass
class RunReportBundle:
    """Everything the report renderer needs, JSON-serializable: per-run rows,
    cross-eval matrices, sweep aggregates and provenance."""

    T: int
    metric: str
    modes: list[str]
    seeds: list[int]
    runs: list[dict]                   # {"mode", "seed", "rows", "cross_eval"}
    provenance: dict
    reduced_rows: dict | None = None
    aggregates: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.aggregates and self.runs:
            self.aggregates = aggregate_rows(self.runs)

    def to_json(self) -> str:
        return json.dumps({
            "format": "atso-report@1",
            "T": self.T,
            "metric": self.metric,
            "modes": self.modes,
            "seeds": self.seeds,
            "provenance": self.provenance,
            "runs": self.runs,
            "aggregates": self.aggregates,
            "reduced_rows": self.reduced_rows,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReportBundle":
        d = json.loads(text)
        if d.get("format") != "atso-report@1":
            raise ReportError(f"unknown report bundle format {d.get('format')!r}")
        return cls(d["T"], d["metric"], d["modes"], d["seeds"], d["runs"],
                   d["provenance"], d.get("reduced_rows"), d.get("aggregates", []))


def aggregate_rows(runs: list[dict]) -> list[dict]:
    """Mean/std/CI of every (mode, generation, split, metric) across seeds."""
    groups: dict[tuple, list[float]] = {}
    for run in runs:
        for r in run["rows"]:
            key = (r["mode"], r["generation"], r["split"], r["metric"])
            groups.setdefault(key, []).append(float(r["value"]))
    out = []
    for (mode, gen, split, metric), vals in sorted(groups.items()):
        arr = np.asarray(vals)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        half = 1.96 * sd / np.sqrt(arr.size)
        out.append({"mode": mode, "generation": gen, "split": split, "metric": metric,
                    "n": int(arr.size), "mean": float(arr.mean()), "std": sd,
                    "ci_low": float(arr.mean() - half), "ci_high": float(arr.mean() + half)})
    return out


def aggregates_csv(aggregates: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "generation", "split", "metric", "n", "mean", "std",
                "ci_low", "ci_high"])
    for a in aggregates:
        w.writerow([a["mode"], a["generation"], a["split"], a["metric"], a["n"],
                    repr(a["mean"]), repr(a["std"]), repr(a["ci_low"]), repr(a["ci_high"])])
    return buf.getvalue()


def bundle_from_reports(reports: list[RunReport], metric: str, T: int,
                        provenance: dict,
                        reduced_rows: dict | None = None) -> RunReportBundle:
    runs = []
    for rep in reports:
        runs.append({"mode": rep.mode, "seed": rep.seed,
                     "rows": run_rows(rep, metric),
                     "cross_eval": cross_eval_rows(rep)})
    modes = sorted({r["mode"] for r in runs})
    seeds = sorted({r["seed"] for r in runs})
    return RunReportBundle(T, metric, modes, seeds, runs, provenance, reduced_rows)


def _pct(v: float | None) -> str:
    return "" if v is None else f"{100.0 * v:.2f}"


def _agg_lookup(bundle: RunReportBundle):
    table = {}
    for a in bundle.aggregates:
        table[(a["mode"], a["generation"], a["split"], a["metric"])] = a["mean"]
    return table


def _render_table1(bundle: RunReportBundle) -> str:
    missing = [m for m in ("self_learning", "stso", "atso") if m not in bundle.modes]
    if missing:
        raise ReportError(f"layout 'table1' missing fields: runs for modes {missing}")
    table = _agg_lookup(bundle)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generation",
                "self_learning_at_R", "self_learning_at_E",
                "stso_at_R", "stso_at_E", "atso_at_R", "atso_at_E"])
    for t in range(bundle.T + 1):
        row = [f"G{t}"]
        for mode in ("self_learning", "stso", "atso"):
            for split in ("reference", "test"):
                v = table.get((mode, str(t), split, bundle.metric))
                if v is None:
                    raise ReportError(f"layout 'table1' missing fields: "
                                      f"{mode}/G{t}/{split}")
                row.append(_pct(v))
        w.writerow(row)
    return buf.getvalue()


def _render_appendix_a(bundle: RunReportBundle) -> str:
    matrices: dict[int, list[list[float]]] = {}
    for run in bundle.runs:
        for row in run["cross_eval"]:
            matrices.setdefault(int(row["generation"]), []).append(
                [float(row[c]) for c in CROSS_EVAL_HEADER[1:]])
    if not matrices:
        raise ReportError("layout 'appendixA' missing fields: cross_eval rows "
                          "(available only for atso runs)")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CROSS_EVAL_HEADER)
    for gen in sorted(matrices):
        mean = np.asarray(matrices[gen]).mean(axis=0)
        w.writerow([f"G{gen}"] + [_pct(v) for v in mean])
    return buf.getvalue()


def _render_table3(bundle: RunReportBundle) -> str:
    if not bundle.reduced_rows:
        raise ReportError("layout 'table3' missing fields: reduced_rows "
                          "(produced by the reduced-class protocol)")
    tags = list(bundle.reduced_rows)
    k = len(next(iter(bundle.reduced_rows.values()))["per_class"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"class_{c}" for c in range(k)] + ["miou"])
    for tag in tags:
        row = bundle.reduced_rows[tag]
        w.writerow([tag] + [_pct(v) for v in row["per_class"]] + [_pct(row["miou"])])
    return buf.getvalue()


def _render_csv(bundle: RunReportBundle) -> str:
    rows = []
    for run in bundle.runs:
        for r in run["rows"]:
            rows.append({**r, "seed": run["seed"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "generation", "mode", "split", "metric", "value"])
    for r in rows:
        w.writerow([r["seed"], r["generation"], r["mode"], r["split"], r["metric"],
                    repr(float(r["value"]))])
    return buf.getvalue()


def render_report(bundle: RunReportBundle, layout: str, out_dir) -> Path:
    """Write one layout artifact; raises before touching disk on mismatch."""
    if layout not in LAYOUTS:
        raise ReportError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    if not bundle.runs:
        raise ReportError("report bundle holds no runs")
    renderers = {
        "table1": (_render_table1, "table1.csv"),
        "appendixA": (_render_appendix_a, "appendix_a.csv"),
        "table3": (_render_table3, "table3.csv"),
        "csv": (_render_csv, "rows.csv"),
        "json": (lambda b: b.to_json(), "report_bundle.json"),
    }
    render, name = renderers[layout]
    text = render(bundle)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def write_run_artifacts(report: RunReport, out_dir, metric: str,
                        provenance: dict) -> None:
    """Serialize one run: generation CSV, cross-eval CSV, models, store."""
    from .learners import save_model

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "generations.csv").write_text(generations_csv(run_rows(report, metric)))
    if report.matrices:
        from .metrics import cross_eval_csv
        (out / "cross_eval.csv").write_text(cross_eval_csv(report.matrices))
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for name, model in sorted(report.models.items()):
        save_model(model, models_dir / f"{name}.mdl")
    report.store.save(out / "store")
    (out / "run.json").write_text(json.dumps({
        "mode": report.mode, "seed": report.seed, "T": report.T,
        "metric": metric, "provenance": provenance,
        "kernel_backend": _kernels.backend(),
        "partition": {"subset1": list(report.partition.subset1_ids),
                      "subset2": list(report.partition.subset2_ids)}
        if report.partition else None,
        "final_model": report.final_model.model_id,
    }, indent=1, sort_keys=True))
