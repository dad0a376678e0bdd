"""Score-quality metrics and latent-space projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .data import DataError, Dataset


def cluster_accuracy(predicted, truth) -> float:
    """Accuracy under the best one-to-one matching of predicted to true classes.

    Solved exactly as an assignment problem on the contingency table. When
    the two sides have different numbers of classes the surplus classes on
    the larger side stay unmatched and count as errors.
    """
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.size == 0:
        raise ValueError("cannot score empty predictions")
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth differ in length")
    p_ids, p_inv = np.unique(predicted, return_inverse=True)
    t_ids, t_inv = np.unique(truth, return_inverse=True)
    table = np.zeros((p_ids.size, t_ids.size), dtype=np.int64)
    np.add.at(table, (p_inv, t_inv), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / predicted.size


@dataclass(frozen=True)
class Correlation:
    r: float
    p_value: float
    n: int


def pearson_r(scores, targets) -> Correlation:
    """Pearson correlation with a two-sided t-test p-value (n - 2 dof)."""
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("scores and targets differ in length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance in scores or targets")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return Correlation(r, p, n)


@dataclass(frozen=True)
class ScoreAlignment:
    """Relabeling of score classes into an ordinal scale."""

    order: np.ndarray        # order[k] = rank of score class k
    class_means: np.ndarray  # reference mean per class (nan if unseen)

    def apply(self, score_classes) -> np.ndarray:
        return self.order[np.asarray(score_classes, dtype=np.int64)]


def align_score_order(score_classes, reference, n_classes: int | None = None) -> ScoreAlignment:
    """Rank score classes by the mean of ``reference`` within each class.

    ``reference`` is training-split side information, never evaluation
    labels. A class with no training members borrows the mean of the
    nearest (by class index) observed class. Equal means keep class order.
    """
    score_classes = np.asarray(score_classes, dtype=np.int64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if score_classes.shape != reference.shape:
        raise ValueError("score classes and reference differ in length")
    k = int(n_classes if n_classes is not None else score_classes.max() + 1)
    sums = np.bincount(score_classes, weights=reference, minlength=k)
    counts = np.bincount(score_classes, minlength=k)
    means = np.full(k, np.nan)
    seen = counts > 0
    if not seen.any():
        raise ValueError("no scored instances")
    means[seen] = sums[seen] / counts[seen]
    filled = means.copy()
    observed = np.flatnonzero(seen)
    for c in np.flatnonzero(~seen):
        filled[c] = means[observed[np.argmin(np.abs(observed - c))]]
    ranking = np.lexsort((np.arange(k), filled))
    order = np.empty(k, dtype=np.int64)
    order[ranking] = np.arange(k)
    return ScoreAlignment(order, means)


def expected_score(probs: np.ndarray, alignment: ScoreAlignment) -> np.ndarray:
    """Continuous ordinal score: expectation of the aligned rank."""
    ranks = np.empty(alignment.order.size)
    ranks[:] = alignment.order
    return np.asarray(probs) @ ranks


@dataclass(frozen=True)
class Projection:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    degenerate: bool


def pca_project(embeddings, out_dim: int = 2) -> Projection:
    """Centred projection onto the leading principal axes.

    Axes are ordered by decreasing variance and each is signed so that its
    largest-magnitude loading is positive. If the data have rank below
    ``out_dim`` the missing axes are zero and ``degenerate`` is set.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an N x d matrix with N >= 2")
    if x.shape[1] < out_dim:
        raise ValueError(f"cannot project {x.shape[1]}-D data onto {out_dim} axes")
    xc = x - x.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    comps = vt[:out_dim].copy()
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    degenerate = rank < out_dim
    if degenerate:
        comps[rank:] = 0.0
    coords = xc @ comps.T
    explained = var[:out_dim] / total if total > 0 else np.zeros(out_dim)
    if degenerate:
        explained[rank:] = 0.0
    return Projection(coords, explained, comps, degenerate)


def quantile_classes(values, n_classes: int, edges_from=None) -> np.ndarray:
    """Bin a continuous target into ``n_classes`` equal-count classes.

    Edges are empirical quantiles (``method="lower"``) of ``edges_from``
    (default: ``values``); values on an edge go to the lower class.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    ref = values if edges_from is None else np.asarray(edges_from, dtype=np.float64).reshape(-1)
    edges = np.quantile(ref, np.arange(1, n_classes) / n_classes, method="lower")
    return np.searchsorted(edges, values, side="left")


def eval_labels_of(dataset: Dataset) -> np.ndarray:
    """The one sanctioned way to read held-out evaluation labels."""
    labels = dataset.eval_labels
    if labels is None:
        raise DataError("dataset carries no evaluation labels")
    return labels


def write_report(path, metrics: dict) -> None:
    """``key: value`` lines, in insertion order."""
    with open(path, "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}: {v}\n")


def write_table(path, metrics: dict) -> None:
    """Two-column tab-separated table of the same metrics."""
    with open(path, "w") as fh:
        fh.write("metric\tvalue\n")
        for k, v in metrics.items():
            fh.write(f"{k}\t{v}\n")
