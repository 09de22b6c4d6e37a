"""Offline line charts (SVG) with a CSV twin holding exactly the plotted values."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics  # noqa: E402

plt.rcParams.update(
    {
        "svg.hashsalt": "icrl",
        "svg.fonttype": "none",
        "font.size": 10,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def line_chart(series: dict[str, tuple[list, list]], path: Path, xlabel: str, ylabel: str, title: str = "") -> tuple[Path, Path]:
    """Write ``path.svg`` and ``path.csv``; ``series`` maps label -> (xs, ys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.5, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1 or any(series):
        ax.legend(frameon=False)
    fig.tight_layout()
    svg = path.with_suffix(".svg")
    fig.savefig(svg, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    table = path.with_suffix(".csv")
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series", xlabel, ylabel])
        for label, (xs, ys) in series.items():
            for x, y in zip(xs, ys):
                w.writerow([label, x, "" if y is None else repr(float(y))])
    return svg, table


def _unique(label: str, taken: dict) -> str:
    out, i = label, 2
    while out in taken:
        out, i = f"{label} ({i})", i + 1
    return out


def plot_metrics(metrics_paths: list[Path], out_dir: Path) -> list[Path]:
    """Render every chart the records support: ICL curves, few-shot, training curve."""
    icl, fewshot, train = {}, {}, {}
    for mp in metrics_paths:
        for rec in read_metrics(mp):
            p = rec["payload"]
            kind = rec["kind"]
            if kind in ("eval-trial", "context-generalization"):
                label = _unique(p.get("label") or f"{Path(mp).parent.name}@{rec['env_step']}", icl)
                ys = p["metrics"]["mean_return"]
                icl[label] = (list(range(1, len(ys) + 1)), ys)
            elif kind == "fewshot":
                label = _unique(p.get("label") or Path(mp).parent.name, fewshot)
                fewshot[label] = (p["demo_counts"], p["mean_return"])
            elif kind == "train-window" and p.get("window") == p.get("K"):
                label = p.get("label") or Path(mp).parent.name
                xs, ys = train.setdefault(label, ([], []))
                xs.append(rec["env_step"])
                ys.append(p.get("mean_return"))
    out = []
    if icl:
        out += line_chart(icl, out_dir / "icl_curve", "episode", "mean return", "Return vs. episode index in trial")
    if fewshot:
        out += line_chart(fewshot, out_dir / "fewshot", "demonstrations", "first-episode return", "Few-shot imitation")
    if train:
        out += line_chart(train, out_dir / "learning_curve", "env steps", "mean episode return", "Training return")
    return out
