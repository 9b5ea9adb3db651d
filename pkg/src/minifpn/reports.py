"""Report files: key=value summaries, TSV tables, and matplotlib figures.

Only wall-clock timings are non-deterministic, so they never go into the
summary or table files; timing lands in its own file and on stdout.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .metrics import pr_curve  # noqa: E402
from .scenes import CLASS_NAMES  # noqa: E402

METRIC_KEYS = ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")


def write_key_values(path, mapping) -> None:
    """One key=value per line; floats via repr for exact round trips."""
    lines = []
    for key, value in mapping.items():
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key}={rendered}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key] = value
    return out


def write_table(path, header, rows) -> None:
    lines = ["#" + "\t".join(header)]
    for row in rows:
        lines.append("\t".join(
            repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def plot_training_curves(records, fig_path) -> None:
    """Loss components per epoch, with val AP on a twin axis when logged."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [r.epoch for r in records]
    ax.plot(epochs, [r.loss for r in records], "k-", label="total")
    ax.plot(epochs, [r.box for r in records], "--", label="box")
    ax.plot(epochs, [r.obj for r in records], "--", label="objectness")
    ax.plot(epochs, [r.cls for r in records], "--", label="class")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.legend(loc="upper right")
    val_points = [(r.epoch, r.val_ap) for r in records if r.val_ap is not None]
    if val_points:
        twin = ax.twinx()
        twin.plot(*zip(*val_points), "o-", color="tab:blue", label="val AP")
        twin.set_ylabel("val AP")
        twin.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)


def write_pr_outputs(dets_per_image, gts_per_image, table_path, fig_path,
                     iou_thresh=0.5) -> None:
    """Per-class PR curves at one IoU threshold: a TSV plus a figure."""
    rows = []
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for class_id, class_name in enumerate(CLASS_NAMES):
        recall, precision = pr_curve(dets_per_image, gts_per_image, class_id,
                                     iou_thresh)
        for r, p in zip(recall, precision):
            rows.append((class_name, float(r), float(p)))
        ax.plot(recall, precision, label=class_name)
    write_table(table_path, ("class", "recall", "precision"), rows)
    ax.set_xlabel(f"recall (IoU {iou_thresh})")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)


def write_ablation_outputs(rows, out_dir) -> None:
    """Per-run table, mean/sd summary table, and a grouped-bar figure.

    `rows` are dicts with variant, seed, params, final_loss, and the six
    metric keys; variants keep their first-seen order.
    """
    out_dir = Path(out_dir)
    header = ("variant", "seed", "params", "final_loss") + METRIC_KEYS
    write_table(out_dir / "ablation.tsv", header,
                [[row[k] for k in header] for row in rows])

    variants = []
    for row in rows:
        if row["variant"] not in variants:
            variants.append(row["variant"])
    summary_rows = []
    stats = {}
    for variant in variants:
        group = [row for row in rows if row["variant"] == variant]
        entry = {"params": group[0]["params"], "seeds": len(group)}
        for key in METRIC_KEYS:
            values = np.array([row[key] for row in group], dtype=float)
            entry[key] = (float(values.mean()), float(values.std()))
        stats[variant] = entry
        summary_rows.append([variant, entry["seeds"], entry["params"]]
                            + [v for key in METRIC_KEYS for v in entry[key]])
    summary_header = (["variant", "seeds", "params"]
                      + [f"{key}_{suffix}" for key in METRIC_KEYS
                         for suffix in ("mean", "sd")])
    write_table(out_dir / "ablation_summary.tsv", summary_header, summary_rows)

    shown = ("ap", "ap_s", "ap_l")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(variants))
    width = 0.8 / len(shown)
    for k, key in enumerate(shown):
        means = [stats[v][key][0] for v in variants]
        sds = [stats[v][key][1] for v in variants]
        ax.bar(x + (k - (len(shown) - 1) / 2) * width, means, width,
               yerr=sds, capsize=3, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=15, ha="right")
    ax.set_ylabel("val AP (mean over seeds, sd bars)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "ablation.png", dpi=110)
    plt.close(fig)


def format_summary_table(rows) -> str:
    """Screen-friendly rendering of the ablation rows."""
    header = ["variant", "seed", "params"] + list(METRIC_KEYS)
    table = [header] + [
        [str(row["variant"]), str(row["seed"]), str(row["params"])]
        + [f"{row[key]:.4f}" for key in METRIC_KEYS] for row in rows]
    widths = [max(len(line[col]) for line in table)
              for col in range(len(header))]
    return "\n".join("  ".join(cell.ljust(width)
                               for cell, width in zip(line, widths)).rstrip()
                     for line in table)
