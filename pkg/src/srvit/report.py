"""CSV tables and figures for training and evaluation runs."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import plotting
from .fields import write_pgm
from .metrics import DegenerateDistributionError, Evaluation, kde, kde_grid, welch_t

log = logging.getLogger(__name__)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_training(report, out_dir) -> None:
    out = Path(out_dir)
    rows = report.curve_rows()
    write_csv(out / "loss.csv", ("epoch", "train_loss", "val_loss"), rows)
    plotting.plot_loss_curves(rows, out / "loss.png", best_epoch=report.best_epoch + 1)


def _kde_rows(g):
    try:
        x = kde_grid(g)
        return list(zip(x, kde(g, x)))
    except (DegenerateDistributionError, ValueError):
        log.warning("sharpness distribution is degenerate; kde.csv left empty")
        return []


def write_evaluation(ev: Evaluation, sample_ids, out_dir, label: str = "SRViT",
                     compare: tuple[str, Evaluation] | None = None) -> dict:
    """Write metrics/sharpness/kde/summary CSVs, figures and prediction PGMs.

    With ``compare = (label, evaluation)`` the second model is overlaid on the
    figures and Welch's t-test on the two sharpness samples goes to
    ``welch.csv`` (positive t: the first model is sharper).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", ("threshold", "pod", "far", "csi", "rmse"), ev.sweep.rows())
    g = ev.sharpness.values
    write_csv(out / "sharpness.csv", ("sample_id", "g"), zip(sample_ids, g))
    write_csv(out / "kde.csv", ("x", "density"), _kde_rows(g))
    write_csv(out / "summary.csv", ("rmse", "r2", "g_mean", "g_std", "patchiness"),
              [(ev.rmse, ev.r2, ev.sharpness.mean, ev.sharpness.std, ev.patchiness)])
    for k, pred in zip(sample_ids, ev.predictions):
        write_pgm(pred, out / f"pred_{k}.pgm")

    sweeps = {label: ev.sweep.rows()}
    samples = {label: g}
    result = {}
    if compare is not None:
        other_label, other = compare
        write_csv(out / "metrics_compare.csv", ("threshold", "pod", "far", "csi", "rmse"),
                  other.sweep.rows())
        sweeps[other_label] = other.sweep.rows()
        samples[other_label] = other.sharpness.values
        wt = welch_t(g, other.sharpness.values)
        write_csv(out / "welch.csv", ("t", "dof", "p_value", "g_mean_a", "g_mean_b"),
                  [(wt.t, wt.dof, wt.p_value, ev.sharpness.mean, other.sharpness.mean)])
        result["welch"] = wt
    plotting.plot_threshold_sweep(sweeps, out / "metrics.png")
    plotting.plot_sharpness_kde(samples, out / "kde.png")
    return result
