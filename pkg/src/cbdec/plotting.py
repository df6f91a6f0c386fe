"""Figures written next to the JSON/text reports."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curve(steps: Sequence[int], losses: Mapping[str, Sequence[float]], path,
                        val: Mapping[int, float] | None = None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, ys in losses.items():
            if len(ys) and np.any(np.asarray(ys) != 0):
                ax.plot(steps, ys, lw=1, label=label)
        if val:
            xs = sorted(val)
            ax.plot(xs, [val[x] for x in xs], "o-", ms=3, label="validation xe")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_metric_report(report: MetricReport, path) -> None:
    with plt.rc_context({**STYLE, "figure.figsize": (8.0, 3.2)}):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        names = ["R-1", "R-2", "R-L", "METEOR-lite"]
        vals = [report.rouge1_f, report.rouge2_f, report.rougeL_f, report.meteor_lite]
        if report.saliency_keyword is not None:
            names.append("saliency")
            vals.append(report.saliency_keyword)
        ax1.bar(names, vals, color="0.35")
        ax1.set_ylim(0, 1)
        ax1.set_title("overlap scores")
        rep = sorted(report.repeat_ngram_pct.items())
        nov = sorted(report.novel_ngram_pct.items())
        labels = [f"rep {n}g" for n, _ in rep] + ["rep sent"] + [f"novel {n}g" for n, _ in nov]
        pct = [v for _, v in rep] + [report.repeat_sentence_pct] + [v for _, v in nov]
        ax2.bar(labels, pct, color="0.6")
        ax2.set_ylim(0, 100)
        ax2.set_ylabel("%")
        ax2.tick_params(axis="x", rotation=45)
        ax2.set_title("repetition / novelty")
        _save(fig, path)


def plot_memory_similarity(cosines: Mapping[str, Sequence[float]], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bins = np.linspace(-1, 1, 41)
        for label, values in cosines.items():
            ax.hist(values, bins=bins, alpha=0.5, label=f"{label} (mean {np.mean(values):.3f})")
        ax.set_xlabel("cosine(article memory, summary memory)")
        ax.set_ylabel("examples")
        ax.legend(frameon=False)
        _save(fig, path)
