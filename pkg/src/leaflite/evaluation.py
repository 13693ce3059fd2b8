"""Confusion matrix, multiclass metrics, one-vs-rest ROC/AUC, and the
repeated augmented-test protocol.

Zero-denominator conventions: a class with no predicted samples has
precision 0, a class with no true samples has recall 0, and F1 is 0 when
precision + recall is 0. Macro scores are unweighted means of the
per-class values (macro F1 averages per-class F1, it is not the harmonic
mean of macro precision and recall).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataset as D
from .augment import AugmentConfig, random_augment, stream_for
from .errors import InputError
from .imageproc import load_image, to_input_tensor
from .model import ModelBundle, forward_features, forward_head

_TEST_TAG = 2


def confusion(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    """Percent correct: 100 * trace / total."""
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return 100.0 * np.trace(cm) / total


def precision_per_class(cm: np.ndarray) -> np.ndarray:
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    return np.divide(tp, predicted, out=np.zeros(len(cm)), where=predicted > 0)


def recall_per_class(cm: np.ndarray) -> np.ndarray:
    actual = cm.sum(axis=1)
    tp = np.diag(cm)
    return np.divide(tp, actual, out=np.zeros(len(cm)), where=actual > 0)


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    p = precision_per_class(cm)
    r = recall_per_class(cm)
    denom = p + r
    return np.divide(2 * p * r, denom, out=np.zeros(len(cm)), where=denom > 0)


def macro_precision(cm: np.ndarray) -> float:
    return float(precision_per_class(cm).mean())


def macro_recall(cm: np.ndarray) -> float:
    return float(recall_per_class(cm).mean())


def macro_f1(cm: np.ndarray) -> float:
    return float(f1_per_class(cm).mean())


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-rest ROC points (fpr, tpr), ties grouped, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positive[order]
    # last index of each tie group
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([boundaries, [len(scores) - 1]])
    tp = np.cumsum(sorted_pos)[ends]
    fp = ends + 1 - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return fpr, tpr


def auc_trapezoid(fpr, tpr) -> float:
    return float(np.trapezoid(tpr, fpr))


def roc_auc(scores, labels, n_classes: int):
    """Per-class {class_id: (fpr, tpr, auc)}; classes without both kinds
    of samples are reported as None."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    out = {}
    for c in range(n_classes):
        positive = labels == c
        try:
            fpr, tpr = roc_curve(scores[:, c], positive)
        except ValueError:
            out[c] = None
            continue
        out[c] = (fpr, tpr, auc_trapezoid(fpr, tpr))
    return out


@dataclass
class EvalReport:
    cm: np.ndarray
    accuracy_percent: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    roc: dict = field(default_factory=dict)
    runs: int = 1
    acc_mean: float = 0.0
    acc_std: float = 0.0
    acc_min: float = 0.0
    acc_max: float = 0.0


def report_from_counts(cm: np.ndarray, roc=None) -> EvalReport:
    return EvalReport(
        cm=cm,
        accuracy_percent=accuracy(cm),
        precision=precision_per_class(cm),
        recall=recall_per_class(cm),
        f1=f1_per_class(cm),
        macro_precision=macro_precision(cm),
        macro_recall=macro_recall(cm),
        macro_f1=macro_f1(cm),
        roc=roc or {},
    )


def predict_split(bundle: ModelBundle, index, assignment, split: str,
                  aug_cfg: AugmentConfig | None, stream_seed: int,
                  batch_size: int = 16):
    """(preds, labels, scores) over one split in canonical order.

    When aug_cfg is given, each image is augmented from a stream keyed by
    (stream_seed, split, entry); the corpus is expected to be enhanced
    already. Inputs are never CLAHE'd here regardless of the bundle flag.
    """
    entry_pos = {e.path: i for i, e in enumerate(index.entries)}
    preds, labels, scores = [], [], []
    for batch in D.batch_iter(index, assignment, split, batch_size, 0, stream_seed):
        imgs = []
        for path, class_id in batch:
            img = load_image(f"{index.root}/{path}")
            if aug_cfg is not None:
                rng = stream_for(stream_seed, _TEST_TAG, entry_pos[path])
                img = random_augment(img, aug_cfg, rng)
            imgs.append(to_input_tensor(img, bundle.graph.input_side)[0])
            labels.append(class_id)
        feats = forward_features(bundle.graph, bundle.weights, np.stack(imgs))
        probs, _ = forward_head(bundle.head, feats, mode="infer")
        preds.extend(probs.argmax(axis=1).tolist())
        scores.append(probs)
    return np.asarray(preds), np.asarray(labels), np.concatenate(scores, axis=0)


def repeated_eval(bundle: ModelBundle, index, assignment, aug_cfg: AugmentConfig | None,
                  runs: int = 100, base_seed: int = 0, split: str = D.TEST,
                  batch_size: int = 16) -> EvalReport:
    """Evaluate `runs` times with independently seeded augmentation streams
    over the same split; aggregates the confusion matrix and pools scores
    for ROC. Accuracy spread is reported as mean/std(population)/min/max."""
    if runs < 1:
        raise InputError("runs must be >= 1")
    n_classes = len(bundle.class_names)
    accs = []
    total_cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    all_scores, all_labels = [], []
    for run in range(runs):
        preds, labels, scores = predict_split(
            bundle, index, assignment, split, aug_cfg,
            stream_seed=(base_seed * 100_003 + run), batch_size=batch_size,
        )
        cm = confusion(preds, labels, n_classes)
        total_cm += cm
        accs.append(accuracy(cm) / 100.0)
        all_scores.append(scores)
        all_labels.append(labels)
    roc = roc_auc(np.concatenate(all_scores), np.concatenate(all_labels), n_classes)
    report = report_from_counts(total_cm, roc)
    accs = np.asarray(accs)
    report.runs = runs
    report.acc_mean = float(accs.mean())
    # identical runs report exactly zero spread, not mean-subtraction dust
    report.acc_std = 0.0 if accs.max() == accs.min() else float(accs.std(ddof=0))
    report.acc_min = float(accs.min())
    report.acc_max = float(accs.max())
    return report


def format_report(report: EvalReport, class_names, sample_counts=None) -> str:
    """Plain-text table mirroring the per-class metrics layout."""
    counts = sample_counts if sample_counts is not None else report.cm.sum(axis=1)
    width = max(len(n) for n in class_names) + 2
    lines = [
        f"{'Class Label':<{width}}{'Sample Count':>14}{'Precision':>12}{'Recall':>10}{'F1-Score':>10}"
    ]
    for i, name in enumerate(class_names):
        lines.append(
            f"{name:<{width}}{counts[i]:>14}{report.precision[i]:>12.4f}"
            f"{report.recall[i]:>10.4f}{report.f1[i]:>10.4f}"
        )
    lines.append("")
    lines.append(f"accuracy_percent={report.accuracy_percent:.4f}")
    lines.append(f"macro_precision={report.macro_precision:.4f}")
    lines.append(f"macro_recall={report.macro_recall:.4f}")
    lines.append(f"macro_f1={report.macro_f1:.4f}")
    if report.runs > 1:
        lines.append(f"runs={report.runs}")
        lines.append(f"accuracy_mean={report.acc_mean:.6f}")
        lines.append(f"accuracy_std={report.acc_std:.6f}")
        lines.append(f"accuracy_min={report.acc_min:.6f}")
        lines.append(f"accuracy_max={report.acc_max:.6f}")
    aucs = {c: v[2] for c, v in report.roc.items() if v is not None}
    for c in sorted(aucs):
        lines.append(f"auc_class_{c}={aucs[c]:.6f}")
    return "\n".join(lines) + "\n"


def roc_points_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("class_id,fpr,tpr\n")
        for c in sorted(report.roc):
            if report.roc[c] is None:
                continue
            fpr, tpr, _ = report.roc[c]
            for f, t in zip(fpr, tpr):
                fh.write(f"{c},{f!r},{t!r}\n")
