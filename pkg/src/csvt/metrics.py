"""Classification metrics, cross-validation and saliency export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LABELS, Record, parse_pnm_header, split
from .fileio import atomic_write_bytes, atomic_write_csv
from .tensor import no_grad
from .tensor.image import bilinear_resize


def confusion(labels: Sequence[int], preds: Sequence[int], num_classes: int = len(LABELS)) -> np.ndarray:
    """K x K counts, rows = actual class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ValueError(f"{labels.size} labels vs {preds.size} predictions")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class Metrics:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    # True where a denominator was zero and the value was set to 0
    flagged: np.ndarray
    tp: np.ndarray = field(repr=False, default=None)
    fp: np.ndarray = field(repr=False, default=None)
    fn: np.ndarray = field(repr=False, default=None)
    tn: np.ndarray = field(repr=False, default=None)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def _safe_div(num, den):
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    out = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    return out, zero


def metrics(cm: np.ndarray) -> Metrics:
    """Per-class precision/recall/F1 (one-vs-rest) and multiclass accuracy.

    Accuracy is ``trace / total``; a zero denominator yields 0 and sets the
    class's flag.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision, p_flag = _safe_div(tp, tp + fp)
    recall, r_flag = _safe_div(tp, tp + fn)
    f1, f_flag = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(
        accuracy=float(tp.sum() / total),
        precision=precision, recall=recall, f1=f1,
        flagged=p_flag | r_flag | f_flag,
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


METRICS_HEADER = ("fold", "class", "precision", "recall", "f1", "flagged")


def metrics_rows(fold, m: Metrics, class_names=LABELS) -> list[tuple]:
    """CSV rows for one evaluation.

    The trailing ``accuracy`` row repeats the accuracy in all three metric
    columns: for single-label data micro-averaged precision, recall and F1
    all equal accuracy.
    """
    rows = [
        (fold, name, f"{m.precision[i]:.6f}", f"{m.recall[i]:.6f}", f"{m.f1[i]:.6f}",
         int(m.flagged[i]))
        for i, name in enumerate(class_names)
    ]
    rows.append((fold, "macro", f"{m.macro_precision:.6f}", f"{m.macro_recall:.6f}",
                 f"{m.macro_f1:.6f}", int(m.flagged.any())))
    acc = f"{m.accuracy:.6f}"
    rows.append((fold, "accuracy", acc, acc, acc, 0))
    return rows


def write_metrics_csv(path, rows) -> None:
    atomic_write_csv(path, METRICS_HEADER, rows)


@dataclass
class CvReport:
    folds: list[Metrics]
    confusions: list[np.ndarray]

    @property
    def accuracies(self) -> list[float]:
        return [m.accuracy for m in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    def rows(self) -> list[tuple]:
        out = []
        for i, m in enumerate(self.folds):
            out += metrics_rows(i, m)
        acc = f"{self.mean_accuracy:.6f}"
        out.append(("mean", "accuracy", acc, acc, acc, 0))
        return out


Predictor = Callable[[Sequence[Record]], Sequence[int]]


def cv_evaluate(build: Callable[[list[Record], int], Predictor], records: Sequence[Record],
                k: int = 5, out_csv=None) -> CvReport:
    """Train on k-1 folds, test on the held-out one, for every fold.

    ``build(train_records, fold)`` returns a callable mapping test records to
    predicted class indices.
    """
    if k < 2:
        raise ValueError("cross-validation needs k >= 2")
    folds, cms = [], []
    for fold in range(k):
        train, test = split(records, fold)
        if not test:
            raise ValueError(f"fold {fold} is empty")
        predict = build(train, fold)
        preds = predict(test)
        cm = confusion([r.label_index for r in test], preds)
        cms.append(cm)
        folds.append(metrics(cm))
    report = CvReport(folds, cms)
    if out_csv is not None:
        write_metrics_csv(out_csv, report.rows())
    return report


# -- saliency -------------------------------------------------------------


def token_saliency(tokens: np.ndarray) -> np.ndarray:
    """Per-token saliency from (n, d) embeddings, min-max scaled to [0, 1].

    Uses the norm of each embedding after removing the mean over tokens:
    the last block ends in LayerNorm, so raw norms are nearly identical
    across tokens. A zero range maps to 0.5 everywhere.
    """
    centered = tokens - tokens.mean(axis=0, keepdims=True)
    s = np.sqrt((centered.astype(np.float64) ** 2).sum(axis=-1))
    lo, hi = s.min(), s.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def attention_saliency(model, image: np.ndarray, upsample: bool = True) -> np.ndarray:
    """Patch saliency grid from the last block's output tokens.

    Returns (H/p, W/p), or (H, W) bilinearly upsampled when ``upsample``.
    """
    p = model.cfg.patch_size
    gh, gw = image.shape[0] // p, image.shape[1] // p
    with no_grad():
        tokens = model.forward_tokens(image[None], training=False).data[0]
    patches = tokens[1:] if tokens.shape[0] == gh * gw + 1 else tokens
    grid = token_saliency(patches).reshape(gh, gw)
    if upsample:
        grid = np.clip(bilinear_resize(grid[..., None], image.shape[0], image.shape[1])[..., 0], 0, 1)
    return grid


def encode_pgm(grid: np.ndarray) -> bytes:
    u8 = np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    magic, w, h, _, offset = parse_pnm_header(blob)
    if magic != b"P5":
        raise ValueError("not a binary PGM (P5)")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)


def write_pgm(path, grid: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_pgm(grid))
