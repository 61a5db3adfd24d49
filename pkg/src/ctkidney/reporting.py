"""Report files, plots and the cross-model comparison table.

Plots are rendered from ``report.json`` alone, so figures can be rebuilt
without model weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .metrics import METRIC_KEYS, EvaluationReport

COMPARISON_HEADER = ("model", "precision", "recall", "f1", "auc", "accuracy", "report_sha256")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _blank(v):
    return "" if v is None else v


def write_report(report: EvaluationReport, model_dir) -> List[Path]:
    """report.json, report.csv, table.txt and per-class roc_/pr_ point files."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = model_dir / "report.json"
    p.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    written.append(p)

    rows = [
        (r["class_name"], r["precision"], r["recall"], r["f1"], _blank(r["auc"]),
         _blank(r["average_precision"]), r["support"])
        for r in report.table_rows()
    ]
    rows.append(("macro",) + tuple(_blank(report.macro[k]) for k in METRIC_KEYS) + ("", report.n_samples))
    rows.append(("weighted",) + tuple(_blank(report.weighted[k]) for k in METRIC_KEYS) + ("", report.n_samples))
    written.append(_write_csv(model_dir / "report.csv",
                              ("class", "precision", "recall", "f1", "auc", "average_precision", "support"), rows))
    t = model_dir / "table.txt"
    t.write_text(report.render_table())
    written.append(t)

    for name, pts in report.roc_points.items():
        written.append(_write_csv(model_dir / f"roc_{name}.csv", ("fpr", "tpr"), pts))
    for name, pts in report.pr_points.items():
        written.append(_write_csv(model_dir / f"pr_{name}.csv", ("recall", "precision"), pts))
    return written


def load_report(model_dir) -> EvaluationReport:
    return EvaluationReport.from_dict(json.loads((Path(model_dir) / "report.json").read_text()))


def plot_report(report: EvaluationReport, plots_dir, title: str = "") -> List[Path]:
    """Confusion-matrix heatmap plus per-class ROC and PR curves as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    out = []

    cm = np.asarray(report.confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(report.classes)), report.classes, rotation=45)
    ax.set_yticks(range(len(report.classes)), report.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > cm.max() / 2 else "black")
    fig.colorbar(im, ax=ax)
    ax.set_title(f"{title} confusion matrix".strip())
    fig.tight_layout()
    p = plots_dir / "confusion.png"
    fig.savefig(p, metadata=meta)
    plt.close(fig)
    out.append(p)

    for kind, points, xl, yl in (("roc", report.roc_points, "false positive rate", "true positive rate"),
                                 ("pr", report.pr_points, "recall", "precision")):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for name in report.classes:
            if name not in points:
                continue
            pts = np.asarray(points[name])
            m = report.per_class[name]
            score = m["auc"] if kind == "roc" else m["average_precision"]
            label = f"{name} ({score:.2f})" if score is not None else name
            if kind == "roc":
                ax.plot(pts[:, 0], pts[:, 1], label=label)
            else:
                ax.step(pts[:, 0], pts[:, 1], where="post", label=label)
        if kind == "roc":
            ax.plot([0, 1], [0, 1], "k--", lw=0.8)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right" if kind == "roc" else "lower left", fontsize=8)
        ax.set_title(f"{title} {kind.upper()}".strip())
        fig.tight_layout()
        p = plots_dir / f"{kind}.png"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        out.append(p)
    return out


def sha256_text(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_comparison(out_dir, models: Sequence[str]) -> Path:
    """One row per model, copied verbatim from each ``report.json``."""
    out_dir = Path(out_dir)
    rows = []
    for m in models:
        rp = out_dir / m / "report.json"
        d = json.loads(rp.read_text())
        rows.append((m,) + tuple(_blank(d["macro"][k]) for k in METRIC_KEYS) + (d["accuracy"], sha256_text(rp)))
    return _write_csv(out_dir / "comparison.csv", COMPARISON_HEADER, rows)


def read_comparison(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
