"""Scalar evaluation metrics: pitch average absolute error, token accuracy,
cosine similarity and clustering purity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    n: int
    units: str  # "Hz" | "fraction" | "unitless"


def aae(pred_hz, ref_hz):
    """Mean absolute pitch error in Hz over frames voiced on both sides."""
    pred = np.asarray(pred_hz, dtype=np.float64)
    ref = np.asarray(ref_hz, dtype=np.float64)
    if pred.shape != ref.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {ref.shape}")
    voiced = (pred > 0) & (ref > 0)
    if not voiced.any():
        raise MetricError("no frame is voiced in both sequences")
    value = float(np.abs(pred[voiced] - ref[voiced]).mean())
    return MetricReport("aae", value, int(voiced.sum()), "Hz")


def content_accuracy(pred, ref):
    """Fraction of exact token matches."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape or pred.size == 0:
        raise MetricError(f"length mismatch or empty input: {pred.shape} vs {ref.shape}")
    value = float((pred == ref).mean())
    return MetricReport("content_accuracy", value, int(pred.size), "fraction")


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity undefined for zero vectors")
    value = float(np.dot(a, b) / (na * nb))
    return MetricReport("cosine_similarity", value, int(a.size), "unitless")


def cluster_purity(assignments, labels):
    """Sum over clusters of the majority label count, divided by n."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape or assignments.size == 0:
        raise MetricError("assignments and labels must be equal-length and non-empty")
    total = 0
    for c in np.unique(assignments):
        _, counts = np.unique(labels[assignments == c], return_counts=True)
        total += counts.max()
    value = float(total / assignments.size)
    return MetricReport("cluster_purity", value, int(assignments.size), "fraction")


def write_metrics_csv(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,value,units,n\n")
        for r in reports:
            fh.write(f"{r.name},{r.value:.6f},{r.units},{r.n}\n")
