"""Metrics analysis: 2-D PCA of termination sets, spread statistics, and
CSV/SVG report emission. Plots are hand-written SVG, no binary deps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METHOD_COLORS = {
    "tsr": "#1f77b4",
    "ps": "#d62728",
    "naive": "#7f7f7f",
    "bc": "#2ca02c",
    "gail": "#9467bd",
    "ppo": "#8c564b",
    "gail+ppo": "#e377c2",
}


@dataclass
class TerminalStateDump:
    method: str
    step: int
    subtask: int
    states: np.ndarray  # (n, obj_dim)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @classmethod
    def load(cls, path) -> "TerminalStateDump":
        d = json.loads(Path(path).read_text())
        return cls(method=d["method"], step=int(d["step"]),
                   subtask=int(d["subtask"]), states=np.array(d["states"]))


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (2, d), orthonormal rows
    explained_variance: np.ndarray  # (2,), descending

    def project(self, states: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(states) - self.mean) @ self.components.T


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.nonzero(np.abs(v) > 1e-12)[0]
    if nz.shape[0] and v[nz[0]] < 0:
        return -v
    return v


def fit_pca(states: np.ndarray) -> PcaModel:
    """Top-2 principal directions of the sample (population) covariance,
    with a deterministic sign convention: each component's first nonzero
    coordinate is positive."""
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = np.array([_fix_sign(evecs[:, j]) for j in order])
    return PcaModel(mean=mean, components=comps,
                    explained_variance=np.maximum(evals[order], 0.0))


def termination_spread(states: np.ndarray) -> float:
    """Total variance (trace of the population covariance) of terminal
    object states; rotation and translation invariant."""
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return float(np.sum(x.var(axis=0)))


# -- SVG rendering ------------------------------------------------------------


def _svg_header(w, h, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">\n'
            f'<rect width="{w}" height="{h}" fill="white"/>\n'
            f'<text x="{w / 2}" y="18" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>\n')


def _bounds(arrays):
    pts = np.concatenate(arrays, axis=0)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return lo - 0.05 * span, hi + 0.05 * span


def svg_scatter(groups: dict, path, title: str = "", size: int = 420) -> None:
    """Two(+)-color overlaid scatter; groups maps label -> (n, 2) points."""
    groups = {k: np.atleast_2d(v) for k, v in groups.items() if len(v)}
    parts = [_svg_header(size, size, title)]
    if groups:
        lo, hi = _bounds(list(groups.values()))
        margin, plot = 30, size - 60

        def to_px(p):
            z = (p - lo) / (hi - lo)
            return margin + z[:, 0] * plot, size - margin - z[:, 1] * plot

        for gi, (label, pts) in enumerate(sorted(groups.items())):
            color = METHOD_COLORS.get(label, "#333333")
            xs, ys = to_px(pts)
            for x, y in zip(xs, ys):
                parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" '
                             f'fill="{color}" fill-opacity="0.6"/>\n')
            parts.append(f'<text x="{margin}" y="{38 + 16 * gi}" fill="{color}" '
                         f'font-family="sans-serif" font-size="12">{label} '
                         f'(n={pts.shape[0]})</text>\n')
    parts.append("</svg>\n")
    Path(path).write_text("".join(parts))


def svg_curves(series: dict, path, title: str = "", xlabel: str = "step",
               size: tuple = (560, 320)) -> None:
    """Line plot; series maps label -> (steps array, values array)."""
    w, h = size
    parts = [_svg_header(w, h, title)]
    series = {k: (np.asarray(s), np.asarray(v)) for k, (s, v) in series.items()
              if len(s) > 0}
    if series:
        all_x = np.concatenate([s for s, _ in series.values()])
        all_y = np.concatenate([v for _, v in series.values()])
        x0, x1 = float(all_x.min()), float(max(all_x.max(), all_x.min() + 1e-9))
        y0, y1 = float(all_y.min()), float(max(all_y.max(), all_y.min() + 1e-9))
        margin = 40

        def to_px(xs, ys):
            px = margin + (xs - x0) / (x1 - x0) * (w - 2 * margin)
            py = h - margin - (ys - y0) / (y1 - y0) * (h - 2 * margin)
            return px, py

        palette = list(METHOD_COLORS.values()) + ["#17becf", "#bcbd22"]
        for gi, (label, (xs, ys)) in enumerate(sorted(series.items())):
            color = METHOD_COLORS.get(label, palette[gi % len(palette)])
            px, py = to_px(xs, ys)
            pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>\n')
            parts.append(f'<text x="{margin}" y="{38 + 16 * gi}" fill="{color}" '
                         f'font-family="sans-serif" font-size="12">{label}</text>\n')
        parts.append(f'<text x="{w / 2}" y="{h - 8}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{xlabel}</text>\n')
    parts.append("</svg>\n")
    Path(path).write_text("".join(parts))


# -- report -------------------------------------------------------------------


def _find_runs(root: Path) -> list[Path]:
    if (root / "results.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/results.json"))


def load_dumps(run_dir: Path) -> list[TerminalStateDump]:
    dump_dir = run_dir / "dumps"
    if not dump_dir.exists():
        return []
    return [TerminalStateDump.load(p) for p in sorted(dump_dir.glob("*.json"))]


def emit_report(root_dir, out_dir=None, scatter_subtask: int = 1) -> dict:
    """Render CSV summary tables and SVG plots from one or more run dirs.

    Missing inputs produce a partial report; gaps are listed in
    report_notes.txt and the returned dict.
    """
    root = Path(root_dir)
    out = Path(out_dir) if out_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    notes: list[str] = []
    runs = _find_runs(root)
    if not runs:
        notes.append(f"no run directories with results.json under {root}")

    # summary table: mean +/- std of final progress per method across seeds
    by_method: dict[str, list] = {}
    for run in runs:
        res = json.loads((run / "results.json").read_text())
        by_method.setdefault(res["method"], []).append(res)
    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["method", "n_seeds", "progress_mean", "progress_std",
                     "progress_mean_pm_std", "naive_progress_mean"])
        for method in sorted(by_method):
            vals = np.array([r["final_progress"] for r in by_method[method]])
            naive = np.array([r.get("naive_progress", np.nan) for r in by_method[method]])
            wr.writerow([method, len(vals), repr(float(vals.mean())),
                         repr(float(vals.std())),
                         f"{vals.mean():.3f} +/- {vals.std():.3f}",
                         repr(float(np.nanmean(naive)))])

    # learning curves: per-subtask fine-tune success rate vs env step
    for run in runs:
        mpath = run / "metrics.csv"
        if not mpath.exists():
            notes.append(f"{run}: no metrics.csv")
            continue
        series: dict = {}
        with open(mpath) as f:
            for row in csv.DictReader(f):
                if row["phase"] != "finetune" or row["success_rate"] == "":
                    continue
                key = f"subtask {row['subtask']}"
                series.setdefault(key, ([], []))
                series[key][0].append(float(row["step"]))
                series[key][1].append(float(row["success_rate"]))
        svg_curves(series, out / f"curves_{run.name}.svg",
                   title=f"fine-tune success rate: {run.name}")

    # overlaid PCA scatter of terminal states for the chosen subtask
    dump_groups: dict[str, list[np.ndarray]] = {}
    for run in runs:
        for d in load_dumps(run):
            if d.subtask == scatter_subtask:
                dump_groups.setdefault(d.method, []).append(d.states)
    if not dump_groups:
        notes.append("no terminal states captured")
    else:
        stacked = {m: np.concatenate(v, axis=0) for m, v in dump_groups.items()}
        pca = fit_pca(np.concatenate(list(stacked.values()), axis=0))
        svg_scatter({m: pca.project(v) for m, v in stacked.items()},
                    out / f"terminal_pca_subtask{scatter_subtask}.svg",
                    title=f"terminal states, subtask {scatter_subtask} (PCA)")

    (out / "report_notes.txt").write_text(
        "\n".join(notes) if notes else "complete\n")
    return {"out_dir": str(out), "notes": notes, "methods": sorted(by_method)}
