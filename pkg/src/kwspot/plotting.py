"""Figure rendering for the reporting paths.

Every CLI command that writes a delimited report also renders a PNG next
to it: training loss curves, sliding-window probability traces, and ROC
curves with the EER point marked.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(records, path):
    """Loss and pos/neg accuracy against training step."""
    steps = [r.step for r in records]
    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax_loss.plot(steps, [r.loss for r in records], lw=0.8, color="tab:blue")
    ax_loss.set_ylabel("batch loss")
    ax_loss.grid(alpha=0.3)
    ax_acc.plot(steps, [r.pos_acc for r in records], lw=0.8, label="positive half")
    ax_acc.plot(steps, [r.neg_acc for r in records], lw=0.8, label="negative half")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.legend(loc="lower right", fontsize=8)
    ax_acc.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_scan_trace(rows, path, keyword, span_s=None):
    """Probability trace over window positions; optional true-span shading.

    ``rows`` are (t_start_s, t_end_s, probability) tuples; ``span_s`` is an
    optional (start_s, end_s) ground-truth interval.
    """
    centers = [(t0 + t1) / 2 for t0, t1, _ in rows]
    probs = [p for _, _, p in rows]
    fig, ax = plt.subplots(figsize=(7, 3))
    if span_s is not None:
        ax.axvspan(span_s[0], span_s[1], color="tab:green", alpha=0.2,
                   label="keyword span")
    ax.plot(centers, probs, marker="o", ms=3, lw=1, color="tab:blue")
    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"P({keyword!r} | window)")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    if span_s is not None:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_roc_curve(scores, labels, path, report=None):
    """ROC curve from the scored evaluation set."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    thresholds = np.r_[np.inf, np.unique(scores)[::-1]]
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    tpr = [(pos >= t).mean() for t in thresholds] + [1.0]
    fpr = [(neg >= t).mean() for t in thresholds] + [1.0]

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, lw=1.2, color="tab:blue")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    if report is not None:
        e = report["eer"]
        ax.plot([e], [1 - e], "o", ms=5, color="tab:red")
        ax.annotate(f"EER {e:.3f}", (e, 1 - e), textcoords="offset points",
                    xytext=(8, -4), fontsize=8)
        ax.set_title(f"AUC {report['auc']:.4f}", fontsize=10)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
