"""Detection and representation quality metrics."""
from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import astuple, dataclass

import numpy as np

from .embedding import as_array
from .errors import DegenerateLabels, LengthMismatch
from .losses import SINGLETON

CSV_HEADER = ("epoch", "mtpr", "mtnr", "nmi", "loss", "probe_acc")


class NoPairsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    mtpr: float
    mtnr: float
    nmi: float
    loss: float
    probe_acc: float


def _pairs(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def _pair_tallies(true_label, detected_label):
    """Return (all pairs, same-true pairs, same-detected pairs, same-both pairs) as ints."""
    t = np.asarray(true_label)
    d = np.asarray(detected_label)
    if t.shape != d.shape or t.ndim != 1:
        raise LengthMismatch(f"label arrays differ in shape: {t.shape} vs {d.shape}")
    n = len(t)
    _, t_idx = np.unique(t, return_inverse=True)
    same_true = _pairs(np.bincount(t_idx))
    grouped = d != SINGLETON
    if not grouped.any():
        return n * (n - 1) // 2, same_true, 0, 0
    _, d_idx = np.unique(d[grouped], return_inverse=True)
    same_det = _pairs(np.bincount(d_idx))
    joint = t_idx[grouped] * (d_idx.max() + 1) + d_idx
    same_both = _pairs(np.bincount(joint))
    return n * (n - 1) // 2, same_true, same_det, same_both


def mtpr(true_label, detected_label) -> float:
    """Fraction of same-class pairs that share a detected (non-SINGLETON) label."""
    _, pos, _, hit = _pair_tallies(true_label, detected_label)
    if pos == 0:
        warnings.warn("no same-class pairs; MTPR reported as 0", NoPairsWarning, stacklevel=2)
        return 0.0
    return hit / pos


def mtnr(true_label, detected_label) -> float:
    """Fraction of different-class pairs that are not grouped together by the detection."""
    total, pos, det, both = _pair_tallies(true_label, detected_label)
    neg = total - pos
    if neg == 0:
        warnings.warn("no different-class pairs; MTNR reported as 1", NoPairsWarning, stacklevel=2)
        return 1.0
    return (neg - (det - both)) / neg


def nmi(a, b) -> float:
    """Mutual information over the geometric mean of the two entropies (natural log)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"label arrays differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("nmi needs at least one sample")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    p = joint / a.size
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    ha = -np.sum(pa * np.log(pa))
    hb = -np.sum(pb * np.log(pb))
    if len(pa) == 1 and len(pb) == 1:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = p > 0
    mi = np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz]))
    return float(min(1.0, max(0.0, mi / np.sqrt(ha * hb))))


def linear_probe(train_emb, train_labels, test_emb, test_labels,
                 epochs: int = 300, lr: float = 0.5) -> float:
    """Test accuracy of softmax regression fit by full-batch gradient descent.

    Features are standardized with the training mean and spread first.
    """
    xtr = as_array(train_emb)
    xte = as_array(test_emb)
    ytr = np.asarray(train_labels)
    yte = np.asarray(test_labels)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise LengthMismatch("embeddings and labels differ in length")
    classes, ytr_idx = np.unique(ytr, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateLabels("linear probe needs at least two classes in the training split")

    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd

    n, d = xtr.shape
    k = len(classes)
    w = np.zeros((d, k))
    b = np.zeros(k)
    onehot = np.eye(k)[ytr_idx]
    for _ in range(epochs):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xtr.T @ g)
        b -= lr * g.sum(axis=0)
    pred = classes[np.argmax(xte @ w + b, axis=1)]
    return float(np.mean(pred == yte))


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def write_metrics_csv(records, dest) -> None:
    """Write records under the fixed header; floats use shortest round-trip repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([_fmt(v) for v in astuple(r)])
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        dest.write(buf.getvalue())


def read_metrics_csv(src) -> list[MetricRecord]:
    if isinstance(src, (str, os.PathLike)):
        with open(src, newline="") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = list(csv.reader(src))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"metrics CSV must start with header {','.join(CSV_HEADER)}")
    out = []
    for row in rows[1:]:
        out.append(MetricRecord(int(row[0]), *(float(v) for v in row[1:])))
    return out
