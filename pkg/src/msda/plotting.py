"""Figures for the report command, rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import sweep_medians  # noqa: E402

STYLE = {"figure.figsize": (5.0, 3.4), "font.size": 9, "axes.grid": True, "grid.alpha": 0.3, "savefig.dpi": 120}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def coefficient_sweep(rows: Sequence[dict], path: Path) -> Path:
    """Median target WER against the swept coefficient, with FT / M2DS2 reference lines."""
    med = sweep_medians(rows, "value")
    axis = next((r["axis"] for r in rows if r.get("axis")), "coefficient")
    points = sorted((float(v), w) for (m, v), w in med.items() if m == "MSDA" and v != "")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if points:
            ax.plot([p[0] for p in points], [100 * p[1] for p in points], "o-", label="MSDA")
        for ref, style in (("FT", "--"), ("M2DS2", ":")):
            if (ref, "") in med:
                ax.axhline(100 * med[(ref, "")], linestyle=style, color="grey", label=ref)
        ax.set_xscale("log")
        ax.set_xlabel(axis)
        ax.set_ylabel("target WER (%)")
        ax.legend()
        return _save(fig, path)


def sample_efficiency(rows: Sequence[dict], path: Path) -> Path:
    med = sweep_medians(rows, "fraction")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method, marker in (("MSDA", "o-"), ("M2DS2", "s-")):
            pts = sorted((float(f), w) for (m, f), w in med.items() if m == method and f != "")
            if pts:
                ax.plot([100 * p[0] for p in pts], [100 * p[1] for p in pts], marker, label=method)
        if ("FT", "") in med:
            ax.axhline(100 * med[("FT", "")], linestyle="--", color="grey", label="FT")
        ax.set_xlabel("target training data (%)")
        ax.set_ylabel("target WER (%)")
        ax.legend()
        return _save(fig, path)


def method_bars(grid: dict, path: Path) -> Path:
    """Grouped bars of median WER, one group per setting."""
    methods, settings = grid["methods"], grid["settings"]
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5.0, 1.2 * len(settings) + 2), 3.4))
        for i, m in enumerate(methods):
            xs, ys = [], []
            for j, s in enumerate(settings):
                v = grid["values"][(m, s)]
                if v is not None:
                    xs.append(j + (i - (len(methods) - 1) / 2) * width)
                    ys.append(100 * v)
            ax.bar(xs, ys, width=width, label=m)
        ax.set_xticks(range(len(settings)))
        ax.set_xticklabels(settings, rotation=20, ha="right")
        ax.set_ylabel("target WER (%)")
        ax.legend(fontsize=7, ncol=3)
        return _save(fig, path)
