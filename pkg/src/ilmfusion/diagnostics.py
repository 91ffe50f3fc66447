"""Loss-curve diagnostics: per-criterion curves and a validation divergence flag."""

from __future__ import annotations

import csv
from dataclasses import dataclass

from ilmfusion.models import LossLog

MIN_RISE = 3


@dataclass
class DivergenceReport:
    criterion: str
    flagged: bool
    longest_rise: int
    start_epoch: int | None


def divergence(train: list[float], valid: list[float]) -> tuple[int, int | None]:
    """Longest run of epoch-over-epoch valid increases during which train loss fell.

    A run counts when valid strictly increases at every step and the train
    loss at the end of the run is below its value at the start.  Returns
    ``(length, first epoch whose valid loss rose)`` with 1-based epochs.
    """
    if len(train) != len(valid):
        raise ValueError("train and valid curves differ in length")
    best, best_start = 0, None
    i = 1
    while i < len(valid):
        if valid[i] > valid[i - 1]:
            j = i
            while j + 1 < len(valid) and valid[j + 1] > valid[j]:
                j += 1
            run = j - i + 1
            if train[j] < train[i - 1] and run > best:
                best, best_start = run, i + 1
            i = j + 1
        else:
            i += 1
    return best, best_start


def diagnose(loss_log: LossLog, criteria=("ctc", "att"), min_rise: int = MIN_RISE) -> dict:
    out = {}
    for crit in criteria:
        run, start = divergence(loss_log.series("train", crit), loss_log.series("valid", crit))
        out[crit] = DivergenceReport(crit, run >= min_rise, run, start)
    return out


def attention_only_divergence(reports: dict) -> bool:
    """Attention validation loss diverges while the CTC one does not."""
    return reports["att"].flagged and not reports["ctc"].flagged


def write_curves(path, loss_log: LossLog, criteria=("ctc", "att")) -> None:
    """Wide CSV: one row per epoch, one column per (split, criterion)."""
    cols = [(s, c) for c in criteria for s in ("train", "valid")]
    series = {k: loss_log.series(*k) for k in cols}
    n = max(len(v) for v in series.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"{s}_{c}" for s, c in cols])
        for e in range(n):
            w.writerow([e + 1] + [f"{series[k][e]:.6f}" if e < len(series[k]) else "" for k in cols])
