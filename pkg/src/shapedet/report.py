"""Report rendering: delimited evaluation tables, aggregate JSON, per-case
surface-distance heatmap exports, and figure files."""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .fileio import write_dist_sidecar, write_obj
from .metrics import EVAL_COLUMNS, _METRIC_KEYS, point_to_mesh_distances, reconstruct_mesh
from .train import COMPONENT_NAMES, LOG_HEADER


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_eval_csv(report, path):
    """One row per (sample, anatomy); missed rows leave metric cells empty."""
    with open(path, "w") as out:
        out.write(",".join(EVAL_COLUMNS) + "\n")
        for row in report.rows:
            out.write(",".join(_cell(row[key]) for key in EVAL_COLUMNS) + "\n")


def write_eval_json(report, path):
    doc = {
        "aggregates": report.aggregates,
        "missed_detections": report.missed_detections,
        "rows": len(report.rows),
    }
    with open(path, "w") as out:
        json.dump(doc, out, indent=2, sort_keys=True)
        out.write("\n")


def export_distance_heatmap(pred_mesh, gt_mesh, base_path):
    """Write pred_mesh as OBJ plus a sidecar of per-vertex distances to
    gt_mesh (base_path gets .obj / .dist suffixes)."""
    values = point_to_mesh_distances(pred_mesh.vertices, gt_mesh)
    write_obj(pred_mesh, base_path + ".obj")
    write_dist_sidecar(values, base_path + ".dist")
    return values


def export_case_heatmaps(report_predictions, templates, out_dir):
    """Heatmap exports for a batch of inference results.

    report_predictions: iterable of (sample_id, {anatomy: (pred_world, gt_world)}).
    """
    os.makedirs(out_dir, exist_ok=True)
    by_anatomy = {t.anatomy: t for t in templates}
    written = []
    for sample_id, cases in report_predictions:
        for anatomy, (pred_world, gt_world) in sorted(cases.items()):
            template = by_anatomy[anatomy]
            pred_mesh = reconstruct_mesh(pred_world, template)
            gt_mesh = reconstruct_mesh(gt_world, template)
            base = os.path.join(out_dir, f"{sample_id}_anatomy_{anatomy}")
            export_distance_heatmap(pred_mesh, gt_mesh, base)
            written.append(base)
    return written


def render_eval_figures(report, out_dir):
    """Box plots of every metric grouped by anatomy, one panel per metric."""
    os.makedirs(out_dir, exist_ok=True)
    hit = [r for r in report.rows if not r["missed"]]
    anatomies = sorted({r["anatomy"] for r in report.rows})
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    for ax, key in zip(axes.ravel(), _METRIC_KEYS):
        groups = [
            [r[key] for r in hit if r["anatomy"] == k and r[key] is not None]
            for k in anatomies
        ]
        if any(groups):
            ax.boxplot(
                [g if g else [float("nan")] for g in groups],
                tick_labels=[str(k) for k in anatomies],
            )
        ax.set_title(key)
        ax.set_xlabel("anatomy")
    fig.suptitle(f"evaluation over {len(hit)} detections ({report.missed_detections} missed)")
    fig.tight_layout()
    path = os.path.join(out_dir, "eval_metrics.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def read_training_log(path):
    """Parse a training log written by fit() into a dict of float columns."""
    with open(path) as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"unrecognized training log header in {path}")
    columns = LOG_HEADER.split(",")
    table = {name: [] for name in columns}
    for line in lines[1:]:
        for name, cell in zip(columns, line.split(",")):
            table[name].append(float(cell))
    return table


def render_training_curves(log_path, out_dir):
    """Two-panel figure: weighted component losses and validation RMSE."""
    table = read_training_log(log_path)
    os.makedirs(out_dir, exist_ok=True)
    epochs = table["epoch"]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(11, 4))
    for name in COMPONENT_NAMES + ("total",):
        column = "lr_loss" if name == "lr" else name
        ax_loss.plot(epochs, table[column], label=name)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_val.plot(epochs, table["val_rmse_world"], label="world RMSE")
    ax_val.plot(epochs, table["val_rmse_local"], label="local RMSE")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation RMSE (voxels)")
    ax_val.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "training_curves.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report(report, out_dir, log_path=None):
    """Full report bundle: CSV + JSON + figures (+ training curves if a log
    is supplied); returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "eval.csv")
    json_path = os.path.join(out_dir, "eval.json")
    write_eval_csv(report, csv_path)
    write_eval_json(report, json_path)
    written = [csv_path, json_path, render_eval_figures(report, out_dir)]
    if log_path is not None and os.path.exists(log_path):
        written.append(render_training_curves(log_path, out_dir))
    return written
