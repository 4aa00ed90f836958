"""SVG box plots of per-user EER against the number of consecutive gestures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_summary(result, mode: str, path: Path) -> None:
    ks = sorted(result.summary[mode])
    per_k = [[c[k].eer for c in result.curves[mode].values() if k in c] for k in ks]
    medians = [result.summary[mode][k][0].median for k in ks]
    with plt.rc_context({"svg.hashsalt": "hmmauth", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        ax.boxplot([[100 * e for e in v] for v in per_k], positions=ks, widths=0.6,
                   medianprops={"color": "red", "linewidth": 2})
        ax.plot(ks, [100 * m for m in medians], color="tab:blue", linewidth=1, alpha=0.6)
        ax.set_xlabel("number of consecutive gestures")
        ax.set_ylabel("EER (%)")
        ax.set_title(f"EER vs window size ({mode})")
        ax.set_ylim(bottom=0)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
