"""Loss terms and their weighted combination.

Batch reductions use ``torch.mean``/``torch.sum`` over the leading axis in
input order; for identical inputs the reduction is therefore deterministic.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .divergence import DEFAULT_SKEW, GaussianDiag, kl_diag, sqrt_js_geo

LOG_2PI = math.log(2.0 * math.pi)
SIMPLEX_TOL = 1e-6

COMPONENTS = ("recon", "prior_kl", "triplet", "side", "score")


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss component is NaN or infinite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # reconstruction
    beta: float = 1.0    # prior KL
    gamma: float = 1.0   # triplet
    delta: float = 1.0   # side information
    zeta: float = 1.0    # score mutual information
    margin: float = 1.0
    lambda_skew: float = DEFAULT_SKEW

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        for name in ("alpha", "beta", "gamma", "delta", "zeta", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.lambda_skew <= 1.0:
            raise ValueError("lambda_skew must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)

    def term_weights(self) -> tuple[float, ...]:
        return (self.alpha, self.beta, self.gamma, self.delta, self.zeta)


@dataclass(frozen=True)
class LossBreakdown:
    """Component values and their weighted total.

    ``labeled`` is the optional semi-supervised cross-entropy; it is zero and
    weightless for ordinary runs, which leaves the five-term sum untouched.
    """

    recon: float
    prior_kl: float
    triplet: float
    side: float
    score: float
    total: float
    labeled: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _check_dims(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_nll(x: torch.Tensor, recon: torch.Tensor, likelihood: str = "bernoulli",
                       *, logits: bool = False) -> torch.Tensor:
    """Mean over instances of -log p(x | recon).

    ``recon`` holds Bernoulli probabilities (or logits with ``logits=True``)
    or the mean of a unit-variance Gaussian. A 1-D input is one instance.
    """
    x = torch.as_tensor(x)
    recon = torch.as_tensor(recon, dtype=x.dtype) if not isinstance(recon, torch.Tensor) else recon
    _check_dims(x, recon, "reconstruction")
    if x.dim() == 1:
        x, recon = x.unsqueeze(0), recon.unsqueeze(0)
    if likelihood == "bernoulli":
        if ((x < 0) | (x > 1)).any():
            raise ValueError("bernoulli likelihood needs x in [0, 1]")
        if logits:
            per = F.binary_cross_entropy_with_logits(recon, x, reduction="none")
        else:
            per = -(torch.xlogy(x, recon) + torch.xlogy(1.0 - x, 1.0 - recon))
    elif likelihood == "gaussian_unit_var":
        per = 0.5 * (x - recon) ** 2 + 0.5 * LOG_2PI
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    return per.sum(-1).mean()


def prior_kl(posterior: GaussianDiag) -> torch.Tensor:
    """Mean KL of the posterior(s) against the standard normal prior."""
    prior = GaussianDiag(torch.zeros_like(posterior.mean), torch.ones_like(posterior.var))
    kl = kl_diag(posterior, prior)
    return kl.mean()


def _check_simplex(probs: torch.Tensor, what: str):
    with torch.no_grad():
        if (probs < 0).any() or ((probs.sum(-1) - 1.0).abs() > SIMPLEX_TOL).any():
            raise ValueError(f"{what} is not a probability vector")


def side_nll(predicted, observed, kind: str = "categorical", *, log_probs: bool = False) -> torch.Tensor:
    """Mean negative log-likelihood of observed side information.

    categorical: ``predicted`` is an (N, K) simplex (or log-probabilities with
    ``log_probs=True``) and ``observed`` class indices.
    continuous: ``predicted`` is a ``(mean, var)`` pair and ``observed`` reals.
    """
    if kind == "categorical":
        pred = predicted if isinstance(predicted, torch.Tensor) else torch.as_tensor(predicted, dtype=torch.float64)
        if pred.dim() == 1:
            pred = pred.unsqueeze(0)
        obs = torch.as_tensor(observed, dtype=torch.long).reshape(-1)
        if obs.shape[0] != pred.shape[0]:
            raise ValueError("number of predictions and observations differ")
        k = pred.shape[-1]
        if ((obs < 0) | (obs >= k)).any():
            raise ValueError(f"observed class index outside [0, {k})")
        if log_probs:
            logp = pred
        else:
            _check_simplex(pred, "side prediction")
            logp = torch.log(pred)
        return -logp.gather(-1, obs.unsqueeze(-1)).squeeze(-1).mean()
    if kind == "continuous":
        mean, var = predicted
        mean = torch.as_tensor(mean)
        var = torch.as_tensor(var, dtype=mean.dtype)
        obs = torch.as_tensor(observed, dtype=mean.dtype).reshape(mean.shape)
        if (var <= 0).any():
            raise ValueError("predicted variance must be positive")
        per = 0.5 * ((obs - mean) ** 2 / var + torch.log(var) + LOG_2PI)
        return per.mean()
    raise ValueError(f"unknown side-information kind {kind!r}")


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -torch.xlogy(p, p).sum(-1)


def score_mi_loss(probs: torch.Tensor) -> torch.Tensor:
    """Negative mutual-information estimate between latent and score.

    Mean per-instance score entropy minus the entropy of the batch-mean
    score distribution. Ranges over [-log K, log K]; -log K is reached
    only by batches that are both confident and balanced across classes.
    """
    probs = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(probs, dtype=torch.float64)
    if probs.dim() != 2 or probs.shape[0] == 0:
        raise ValueError("score batch must be a non-empty (N, K) array")
    if probs.shape[1] < 2:
        raise ValueError("need at least two score classes")
    _check_simplex(probs, "score distribution")
    conditional = _entropy(probs).mean()
    marginal = _entropy(probs.mean(0))
    return conditional - marginal


def triplet_sqrt_js(anchor: GaussianDiag, positive: GaussianDiag, negative: GaussianDiag,
                    w: LossWeights | None = None, reduction: str = "sum") -> torch.Tensor:
    """Hinge triplet loss with the square-root skew-geometric JS distance.

    ``reduction="sum"`` adds the hinge over all triplets; ``"mean"`` divides
    by their count (scale-stable when the triplet count varies); ``"none"``
    returns the per-triplet values.
    """
    w = w or LossWeights()
    if not (anchor.dim == positive.dim == negative.dim):
        raise ValueError("anchor, positive and negative must share a dimension")
    d_pos = sqrt_js_geo(anchor, positive, w.lambda_skew)
    d_neg = sqrt_js_geo(anchor, negative, w.lambda_skew)
    hinge = torch.clamp_min(d_pos - d_neg + w.margin, 0.0)
    if reduction == "sum":
        return hinge.sum()
    if reduction == "mean":
        return hinge.mean() if hinge.numel() else hinge.sum()
    if reduction == "none":
        return hinge
    raise ValueError(f"unknown reduction {reduction!r}")


def weighted_total(parts, w: LossWeights, labeled=0.0, labeled_weight: float = 0.0):
    """alpha*recon + beta*prior_kl + gamma*triplet + delta*side + zeta*score
    (+ labeled_weight*labeled), evaluated left to right.

    Works on floats and on tensors alike, so the training graph and the
    recorded history share one formula.
    """
    recon, kl, trip, side, score = parts
    total = (w.alpha * recon + w.beta * kl + w.gamma * trip
             + w.delta * side + w.zeta * score)
    if labeled_weight:
        total = total + labeled_weight * labeled
    return total


def total_loss(parts, w: LossWeights, *, labeled: float = 0.0,
               labeled_weight: float = 0.0) -> LossBreakdown:
    """Combine five component values into a ``LossBreakdown``.

    ``parts`` is a sequence ordered as ``COMPONENTS`` or a mapping keyed by
    those names.
    """
    if isinstance(parts, dict):
        parts = [parts[name] for name in COMPONENTS]
    values = [float(v) for v in parts]
    if len(values) != len(COMPONENTS):
        raise ValueError(f"expected {len(COMPONENTS)} components, got {len(values)}")
    for name, v in zip(COMPONENTS, values):
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    labeled = float(labeled)
    if not math.isfinite(labeled):
        raise NonFiniteLossError("labeled", labeled)
    total = weighted_total(values, w, labeled, labeled_weight)
    return LossBreakdown(*values, total=total, labeled=labeled)
