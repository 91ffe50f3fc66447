"""PNG figures for the report commands (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ilmfusion.models import LossLog  # noqa: E402

STYLE = {"figure.figsize": (6.0, 3.2), "font.size": 9, "axes.linewidth": 0.6, "savefig.dpi": 120}


def plot_loss_curves(loss_log: LossLog, path, criteria=("ctc", "att"), flags: dict | None = None) -> None:
    """One panel per criterion with train and valid curves."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(criteria), sharex=True, squeeze=False)
        for ax, crit in zip(axes[0], criteria):
            for split, style in (("train", "-"), ("valid", "--")):
                ys = loss_log.series(split, crit)
                ax.plot(range(1, len(ys) + 1), ys, style, label=split)
            title = crit
            if flags and crit in flags:
                title += "  (valid diverges)" if flags[crit] else ""
            ax.set_title(title)
            ax.set_xlabel("epoch")
            ax.legend(frameon=False)
        axes[0][0].set_ylabel("loss per utterance")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(rows: list[tuple[float, float]], path, best: float | None = None) -> None:
    """MER against the internal-LM weight."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs, ys = zip(*rows)
        ax.plot(xs, ys, "o-")
        if best is not None:
            ax.axvline(best, color="0.6", lw=0.8)
        ax.set_xlabel("lambda_ilm")
        ax.set_ylabel("MER")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
