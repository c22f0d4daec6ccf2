"""Report rendering: per-organ growth plots and summary tables.

Figures are SVG scatter plots of per-case organ values against gestational
age, with the fitted line and its printed coefficients when a growth-curve
table is available. Rendering is deterministic: a fixed svg.hashsalt and a
cleared Date field make bytes identical across reruns of the same inputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .stats import read_consistency_csv, read_growth_csv, read_organ_stats_csv

_METRICS = {
    "t2s_mean": ("mean T2* (ms)", "t2s"),
    "volume_ml": ("volume (mL)", "volume"),
}
_RC = {"svg.hashsalt": "t2srecon", "font.size": 9}


def _plot_growth(points, curve, organ: str, ylabel: str, path: Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        ga = [p[0] for p in points]
        val = [p[1] for p in points]
        ax.scatter(ga, val, s=24, color="#2c6fbb", zorder=3)
        if curve is not None:
            slope = float(curve["slope"])
            intercept = float(curve["intercept"])
            lo, hi = min(ga), max(ga)
            pad = 0.5 if hi == lo else 0.0
            xs = np.linspace(lo - pad, hi + pad, 50)
            ax.plot(xs, intercept + slope * xs, color="#c0392b", lw=1.4, zorder=2)
            ax.set_title(
                f"{organ}: slope={curve['slope']}, r2={curve['r2']}, "
                f"r={curve['pearson_r']}",
                fontsize=8,
            )
        else:
            ax.set_title(organ)
        ax.set_xlabel("gestational age (weeks)")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join([" --- "] * len(header)) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines)


def render_report(out_dir, log=None) -> list:
    """Render figures and report.md from the CSV products in `out_dir`."""
    out = Path(out_dir)
    stats_path = out / "organ_stats.csv"
    if not stats_path.exists():
        raise ConfigError(f"missing statistics file {stats_path}; run the stats stage first")
    rows = read_organ_stats_csv(stats_path)
    growth_path = out / "growth_curves.csv"
    curves = {}
    if growth_path.exists():
        curves = {(r["metric"], r["organ"]): r for r in read_growth_csv(growth_path)}
    consistency_path = out / "consistency.csv"
    consistency = (read_consistency_csv(consistency_path)
                   if consistency_path.exists() else [])

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    produced = []
    organs = list(dict.fromkeys(r["organ"] for r in rows))
    figure_files: dict = {}
    for organ in organs:
        for metric, (ylabel, slug) in _METRICS.items():
            pts = []
            for r in rows:
                if r["organ"] != organ or not r[metric]:
                    continue
                if metric == "t2s_mean" and int(r["n"] or 0) <= 0:
                    continue
                pts.append((float(r["GA"]), float(r[metric])))
            if not pts:
                continue
            path = fig_dir / f"growth_{organ}_{slug}.svg"
            _plot_growth(pts, curves.get((metric, organ)), organ, ylabel, path)
            produced.append(path)
            figure_files.setdefault(organ, []).append(path)

    sections = ["# T2* pipeline report", ""]
    sections += ["## Organ statistics", ""]
    sections.append(_md_table(
        ["case", "GA", "organ", "n", "volume (mL)", "T2* mean (ms)", "T2* sd (ms)"],
        [[r["case"], r["GA"], r["organ"], r["n"], r["volume_ml"],
          r["t2s_mean"], r["t2s_sd"]] for r in rows],
    ))
    sections.append("")
    if consistency:
        sections += ["## Reconstruction consistency (2-sigma band)", ""]
        sections.append(_md_table(
            ["case", "organ", "dynamics", "mean", "sigma", "band", "recon mean", "pass"],
            [[r["case"], r["organ"], r["n_dynamics"], r["mean"], r["sigma"],
              f"{r['band_lo']} - {r['band_hi']}", r["recon_mean"],
              "yes" if r["pass"] == "1" else "no"] for r in consistency],
        ))
        sections.append("")
    if curves:
        sections += ["## Growth curves", ""]
        sections.append(_md_table(
            ["organ", "metric", "n", "slope", "intercept", "r2", "pearson_r"],
            [[r["organ"], r["metric"], r["n"], r["slope"], r["intercept"],
              r["r2"], r["pearson_r"]]
             for r in (read_growth_csv(growth_path) if growth_path.exists() else [])],
        ))
        sections.append("")
    sections += ["## Figures", ""]
    for organ in organs:
        for path in figure_files.get(organ, []):
            sections.append(f"![{path.stem}](figures/{path.name})")
    sections.append("")
    report_path = out / "report.md"
    report_path.write_text("\n".join(sections))
    produced.append(report_path)
    if log:
        log(f"[report] wrote {len(produced) - 1} figures and {report_path.name}")
    return produced


def report_stage(config, runner) -> None:
    out = config.require_out()
    stats_path = out / "organ_stats.csv"
    if not stats_path.exists():
        raise ConfigError(f"missing statistics file {stats_path}; run the stats stage first")
    inputs = [stats_path]
    for name in ("growth_curves.csv", "consistency.csv"):
        p = out / name
        if p.exists():
            inputs.append(p)

    runner.run("report", inputs, {}, lambda: render_report(out, log=runner.log))
