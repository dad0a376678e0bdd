"""Mining (anchor, positive, negative) index triples from a batch."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_N_BINS = 4
DEFAULT_JITTER = 0.1
# beyond this many eligible triples we sample by rejection instead of enumerating
_ENUMERATE_LIMIT = 200_000


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


class TripletShortfall(UserWarning):
    """Fewer eligible triplets exist than were requested."""


class MinedTriplets(list):
    """A list of ``Triplet`` that also records how many were requested."""

    def __init__(self, items=(), requested: int = 0):
        super().__init__(items)
        self.requested = requested

    @property
    def shortfall(self) -> int:
        return max(self.requested - len(self), 0)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        a = np.array(self, dtype=np.int64)
        return a[:, 0], a[:, 1], a[:, 2]


def _class_pool(classes: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-row weight (# eligible (positive, negative) pairs) and total pool."""
    ids, inverse, counts = np.unique(classes, return_inverse=True, return_counts=True)
    n = classes.size
    per_row = (counts[inverse] - 1) * (n - counts[inverse])
    return inverse, per_row, int(per_row.sum())


def _enumerate(classes: np.ndarray) -> list[Triplet]:
    out = []
    n = classes.size
    for a in range(n):
        same = np.flatnonzero(classes == classes[a])
        diff = np.flatnonzero(classes != classes[a])
        for p in same:
            if p == a:
                continue
            out.extend(Triplet(a, int(p), int(q)) for q in diff)
    return out


def mine_by_class(side_classes, n_triplets: int, seed: int = 0) -> MinedTriplets:
    """Uniform sample, without replacement, of class-consistent triplets.

    Anchor and positive share a class, the negative does not. Classes with
    a single member never supply anchors. If fewer eligible triplets exist
    than requested, all of them are returned and a ``TripletShortfall``
    warning is logged; the result is never padded.
    """
    classes = np.asarray(side_classes).reshape(-1)
    if np.unique(classes).size < 2:
        raise ValueError("triplet mining needs at least two classes in the batch")
    if n_triplets < 1:
        raise ValueError("n_triplets must be positive")
    rng = np.random.default_rng(seed)
    _, per_row, pool = _class_pool(classes)
    if pool == 0:
        result = MinedTriplets([], n_triplets)
    elif n_triplets >= pool or pool <= _ENUMERATE_LIMIT and 2 * n_triplets >= pool:
        every = _enumerate(classes)
        if n_triplets >= pool:
            chosen = every
        else:
            pick = np.sort(rng.choice(pool, size=n_triplets, replace=False))
            chosen = [every[i] for i in pick]
        result = MinedTriplets(chosen, n_triplets)
    else:
        # anchor ~ number of triples it heads, then uniform positive/negative
        probs = per_row / pool
        seen, chosen = set(), []
        while len(chosen) < n_triplets:
            a = int(rng.choice(classes.size, p=probs))
            same = np.flatnonzero(classes == classes[a])
            same = same[same != a]
            diff = np.flatnonzero(classes != classes[a])
            t = Triplet(a, int(rng.choice(same)), int(rng.choice(diff)))
            if t not in seen:
                seen.add(t)
                chosen.append(t)
        result = MinedTriplets(chosen, n_triplets)
    if result.shortfall:
        log.warning("requested %d triplets, only %d eligible", n_triplets, len(result))
    return result


def quantile_bins(values, n_bins: int) -> np.ndarray:
    """Bin ids from empirical quantiles; a value equal to an edge goes to the
    lower bin. Edges are data points, so any strictly increasing transform
    of ``values`` gives the same assignment."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    n_distinct = np.unique(values).size
    if n_distinct < 2:
        raise ValueError("all values are identical; cannot bin")
    if n_bins > n_distinct:
        raise ValueError(f"n_bins={n_bins} exceeds the {n_distinct} distinct values")
    edges = np.quantile(values, np.arange(1, n_bins) / n_bins, method="lower")
    return np.searchsorted(edges, values, side="left")


def mine_by_quantile(side_values, n_bins: int = DEFAULT_N_BINS, n_triplets: int = 1,
                     seed: int = 0) -> MinedTriplets:
    """Quantile-bin continuous side information, then mine by bin."""
    bins = quantile_bins(side_values, n_bins)
    return mine_by_class(bins, n_triplets, seed)


@dataclass(frozen=True)
class Augment:
    """Perturbation applied to make positives in self-supervised mining.

    ``jitter``: Gaussian noise with std ``strength`` x per-feature std of the
    batch (tabular). ``shift``: random integer translation of 28x28 images
    by up to ``strength`` pixels per axis, zero-filled.
    """

    kind: str = "jitter"
    strength: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.kind not in ("jitter", "shift"):
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.strength < 0:
            raise ValueError("augmentation strength must be >= 0")

    def apply(self, rows: np.ndarray, rng: np.random.Generator, feature_std: np.ndarray) -> np.ndarray:
        if self.strength == 0:
            return rows.copy()
        if self.kind == "jitter":
            return rows + self.strength * feature_std * rng.standard_normal(rows.shape)
        side = int(round(np.sqrt(rows.shape[1])))
        if side * side != rows.shape[1]:
            raise ValueError("shift augmentation needs square images")
        out = np.zeros_like(rows)
        k = int(self.strength)
        for i, row in enumerate(rows):
            img = row.reshape(side, side)
            dy, dx = rng.integers(-k, k + 1, size=2)
            shifted = np.zeros_like(img)
            ys, yd = (slice(0, side - dy), slice(dy, side)) if dy >= 0 else (slice(-dy, side), slice(0, side + dy))
            xs, xd = (slice(0, side - dx), slice(dx, side)) if dx >= 0 else (slice(-dx, side), slice(0, side + dx))
            shifted[yd, xd] = img[ys, xs]
            out[i] = shifted.reshape(-1)
        return out


@dataclass
class SelfSupervisedTriplets:
    """Triplets indexing into ``concat([batch, views])``.

    ``views[i]`` is the augmented copy of ``triplets[i].anchor`` and sits at
    row ``batch_size + i`` of the concatenation.
    """

    triplets: MinedTriplets
    views: np.ndarray
    batch_size: int


def mine_self_supervised(batch, augment: Augment | None = None, n_triplets: int | None = None,
                         seed: int = 0) -> SelfSupervisedTriplets:
    batch = np.asarray(batch)
    n = batch.shape[0]
    if n < 2:
        raise ValueError("self-supervised mining needs a batch of at least 2")
    augment = augment or Augment()
    n_triplets = n if n_triplets is None else n_triplets
    rng = np.random.default_rng(seed)
    anchors = rng.integers(0, n, size=n_triplets)
    # negative: uniform over the other n - 1 rows
    negatives = rng.integers(0, n - 1, size=n_triplets)
    negatives = negatives + (negatives >= anchors)
    std = batch.std(0)
    views = augment.apply(batch[anchors], rng, std)
    trips = MinedTriplets(
        [Triplet(int(a), n + i, int(b)) for i, (a, b) in enumerate(zip(anchors, negatives))],
        n_triplets,
    )
    return SelfSupervisedTriplets(trips, views, n)
