"""Result artifacts: a JSON summary, delimited matrices, and rendered figures.

Outputs carry no timestamps, so a rerun with the same seed and config is
byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # file rendering only, no display server
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError, EmptyInputError
from .train import ConfusionMatrix, EpochStats, FoldResult

SCHEMA_VERSION = 1


def results_payload(fold_results: list[FoldResult], seed=None, config_hash=None) -> dict:
    if not fold_results:
        raise EmptyInputError("no fold results to report")
    was = [r.wa for r in fold_results]
    uas = [r.ua for r in fold_results]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n_folds": len(fold_results),
        "folds": [{
            "fold": r.fold,
            "wa": r.wa,
            "ua": r.ua,
            "best_epoch": r.best_epoch,
            "best_val_ua": r.best_val_ua,
            "epochs_run": len(r.history),
            "n_test_utterances": r.n_test_utterances,
        } for r in fold_results],
        "wa": {"mean": float(np.mean(was)), "std": float(np.std(was))},
        "ua": {"mean": float(np.mean(uas)), "std": float(np.std(uas))},
    }
    if seed is not None:
        payload["seed"] = int(seed)
    if config_hash is not None:
        payload["config_hash"] = config_hash
    return payload


def write_results_json(path, fold_results: list[FoldResult], seed=None,
                       config_hash=None) -> Path:
    path = Path(path)
    payload = results_payload(fold_results, seed=seed, config_hash=config_hash)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def aggregate_confusion(fold_results: list[FoldResult]) -> ConfusionMatrix:
    if not fold_results:
        raise EmptyInputError("no fold results to aggregate")
    names = fold_results[0].confusion.class_names
    if any(r.confusion.class_names != names for r in fold_results):
        raise ContractError("folds disagree on class names")
    total = sum(r.confusion.counts for r in fold_results)
    return ConfusionMatrix(total, names)


def write_confusion_csv(path, cm: ConfusionMatrix) -> Path:
    """Rows are true classes, columns predicted classes."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_class", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            writer.writerow([name, *(int(v) for v in row)])
    return path


def write_history_csv(path, history: list[EpochStats]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_ua"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_ua)])
    return path


def render_confusion_heatmap(path, cm: ConfusionMatrix, title="Confusion matrix") -> Path:
    path = Path(path)
    k = len(cm.class_names)
    fig, ax = plt.subplots(figsize=(1.1 * k + 2.0, 1.0 * k + 1.5))
    image = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(k), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    threshold = cm.counts.max() / 2 if cm.counts.max() else 0.5
    for i in range(k):
        for j in range(k):
            color = "white" if cm.counts[i, j] > threshold else "black"
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color=color)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_history_curves(path, fold_results: list[FoldResult]) -> Path:
    path = Path(path)
    fig, (ax_loss, ax_ua) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for r in fold_results:
        epochs = [h.epoch for h in r.history]
        ax_loss.plot(epochs, [h.train_loss for h in r.history], alpha=0.7,
                     label=f"fold {r.fold}")
        ax_ua.plot(epochs, [h.val_ua for h in r.history], alpha=0.7)
    ax_loss.set_ylabel("train loss")
    ax_ua.set_ylabel("validation UA")
    ax_ua.set_xlabel("epoch")
    ax_ua.set_ylim(0.0, 1.02)
    if len(fold_results) <= 10:
        ax_loss.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def report(out_dir, fold_results: list[FoldResult], seed=None,
           config_hash=None) -> list[Path]:
    """Write the full artifact set for a finished run into one directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_results_json(out_dir / "results.json", fold_results,
                                  seed=seed, config_hash=config_hash)]
    total = aggregate_confusion(fold_results)
    written.append(write_confusion_csv(out_dir / "confusion.csv", total))
    for r in fold_results:
        written.append(write_history_csv(out_dir / f"history_fold{r.fold:02d}.csv",
                                         r.history))
    written.append(render_confusion_heatmap(out_dir / "confusion.png", total))
    written.append(render_history_curves(out_dir / "history.png", fold_results))
    return written
