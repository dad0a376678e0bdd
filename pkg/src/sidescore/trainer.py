"""Optimization loop over the weighted five-term objective."""

from __future__ import annotations

import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .data import CATEGORICAL, Dataset, training_flow
from .divergence import GaussianDiag
from .losses import (COMPONENTS, LossBreakdown, LossWeights, NonFiniteLossError, prior_kl,
                     reconstruction_nll, score_mi_loss, side_nll, total_loss, triplet_sqrt_js,
                     weighted_total)
from .model import ModelSpec, ScoreModel, TrainedModel, sample_latent
from .triplets import Augment, mine_by_class, mine_by_quantile, mine_self_supervised

log = logging.getLogger(__name__)

TRIPLET_REGIMES = ("by_class", "by_quantile", "self_supervised", "off")


class ConfigError(ValueError):
    """Inconsistent training configuration."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    triplet_regime: str = "by_class"
    n_triplets: int | None = None          # None: one per batch row
    triplet_reduction: str = "sum"
    n_bins: int = 4
    augment: Augment = field(default_factory=Augment)
    labeled_fraction_term: float = 1.0     # weight of the labeled cross-entropy
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.triplet_regime not in TRIPLET_REGIMES:
            raise ConfigError(f"triplet_regime must be one of {TRIPLET_REGIMES}")
        if self.triplet_regime != "off" and self.batch_size < 2:
            raise ConfigError("triplet mining needs batch_size >= 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.triplet_reduction not in ("sum", "mean"):
            raise ConfigError("triplet_reduction must be 'sum' or 'mean'")
        if self.labeled_fraction_term < 0:
            raise ConfigError("labeled_fraction_term must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        d["augment"] = asdict(self.augment)
        return d


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)

    def totals(self) -> list[float]:
        return [r.total for r in self.epochs]

    def component(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.epochs]

    def to_table(self) -> str:
        """Tab-separated per-epoch losses (no timings, so runs compare byte-for-byte)."""
        cols = list(COMPONENTS) + ["labeled", "total"]
        lines = ["epoch\t" + "\t".join(cols)]
        for i, r in enumerate(self.epochs, 1):
            lines.append(f"{i}\t" + "\t".join(repr(float(getattr(r, c))) for c in cols))
        return "\n".join(lines) + "\n"


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _check_inputs(spec: ModelSpec, data: Dataset, cfg: TrainConfig):
    if data.features.shape[1] != spec.input_dim:
        raise ConfigError(f"data has {data.features.shape[1]} features, spec expects {spec.input_dim}")
    if len(data) == 0:
        raise ConfigError("training data is empty")
    if not np.isfinite(data.features).all():
        raise ConfigError("training features contain NaN or infinite values")
    w = cfg.weights
    if data.side is None:
        if w.delta > 0:
            raise ConfigError("side-information weight delta > 0 but the data has no side information")
        if cfg.triplet_regime in ("by_class", "by_quantile") and w.gamma > 0:
            raise ConfigError(f"triplet regime {cfg.triplet_regime!r} needs side information")
    else:
        if spec.side_kind == "none" and w.delta > 0:
            raise ConfigError("delta > 0 but the model has no side head")
        if spec.side_kind != "none" and data.side.kind != spec.side_kind:
            raise ConfigError(f"side information is {data.side.kind}, model expects {spec.side_kind}")
        if data.side.kind == CATEGORICAL and spec.side_kind == "categorical" \
                and data.side.values.max() >= spec.n_side_classes:
            raise ConfigError("side class id exceeds n_side_classes")
        if cfg.triplet_regime == "by_class" and data.side.kind != CATEGORICAL and w.gamma > 0:
            raise ConfigError("by_class mining needs categorical side information; use by_quantile")


def _encode(model: ScoreModel, x) -> GaussianDiag:
    """Encode, reporting a diverged encoder as a numerical abort."""
    try:
        return model.encode(x)
    except ValueError as exc:
        if "entries must be finite" not in str(exc):
            raise
        raise NonFiniteLossError("posterior", float("nan")) from exc


class _Objective:
    """Computes the per-batch loss components for one model."""

    def __init__(self, model: ScoreModel, cfg: TrainConfig, side_values, side_target, features):
        self.model = model
        self.cfg = cfg
        self.spec = model.spec
        self.side_values = side_values      # numpy, for mining
        self.side_target = side_target      # tensor, for the side head
        self.features = features

    def components(self, idx: torch.Tensor, gen: torch.Generator, epoch: int, step: int):
        model, cfg, w = self.model, self.cfg, self.cfg.weights
        xb = self.features[idx]
        post = _encode(model, xb)
        noise = torch.randn(post.mean.shape, generator=gen, dtype=post.mean.dtype)
        z = sample_latent(post, noise)
        zero = xb.new_zeros(())

        recon = reconstruction_nll(xb, model.decode_logits(z), self.spec.likelihood, logits=True)
        kl = prior_kl(post)

        side = zero
        if self.side_target is not None and model.side_head is not None:
            st = self.side_target[idx]
            if self.spec.side_kind == "categorical":
                side = side_nll(F.log_softmax(model.side_logits(z), -1), st, log_probs=True)
            else:
                side = side_nll(model.predict_side(z), st, "continuous")

        score = score_mi_loss(model.predict_score(z))
        triplet = self._triplet(idx, xb, post, epoch, step) if w.gamma > 0 else zero
        return recon, kl, triplet, side, score

    def _triplet(self, idx, xb, post: GaussianDiag, epoch: int, step: int) -> torch.Tensor:
        cfg = self.cfg
        zero = xb.new_zeros(())
        n = len(idx)
        n_trip = cfg.n_triplets or n
        seed = _step_seed(cfg.seed, epoch, step)
        if cfg.triplet_regime == "off" or n < 2:
            return zero
        if cfg.triplet_regime == "self_supervised":
            mined = mine_self_supervised(xb.detach().cpu().numpy(), cfg.augment, n_trip, seed)
            views = torch.as_tensor(mined.views, dtype=xb.dtype)
            vpost = _encode(self.model, views)
            post = GaussianDiag(torch.cat([post.mean, vpost.mean]), torch.cat([post.var, vpost.var]))
            trips = mined.triplets
        else:
            sv = self.side_values[idx.numpy()]
            if np.unique(sv).size < 2:
                return zero
            if cfg.triplet_regime == "by_class":
                trips = mine_by_class(sv, n_trip, seed)
            else:
                if np.unique(sv).size < cfg.n_bins:
                    return zero
                trips = mine_by_quantile(sv, cfg.n_bins, n_trip, seed)
        if not trips:
            return zero
        a, p, q = (torch.as_tensor(v) for v in trips.as_arrays())
        return triplet_sqrt_js(post[a], post[p], post[q], cfg.weights, cfg.triplet_reduction)


def _guard(parts, labeled=None):
    for name, v in zip(COMPONENTS, parts):
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, float(v.detach()))
    if labeled is not None and not torch.isfinite(labeled):
        raise NonFiniteLossError("labeled", float(labeled.detach()))


def _manifest(spec: ModelSpec, cfg: TrainConfig, extra: dict) -> dict:
    return {
        "package_version": __version__,
        "model": spec.to_dict(),
        "train": cfg.to_dict(),
        "optimizer": "Adam(betas=(0.9, 0.999), eps=1e-8)",
        "latent_samples_per_step": 1,
        "shuffle": "torch.randperm per epoch, generator seeded with train.seed",
        "triplet_seed": "SeedSequence([seed, epoch, step])",
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "platform": platform.platform(),
        **extra,
    }


def _fit(spec: ModelSpec, data: Dataset, cfg: TrainConfig, labeled_idx=None, labels=None):
    _check_inputs(spec, data, cfg)
    dtype = getattr(torch, cfg.dtype)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ScoreModel(spec).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    features = torch.as_tensor(data.features, dtype=dtype)
    side_values = side_target = None
    extra = {}
    if data.side is not None:
        side_values = data.side.values
        if data.side.kind == CATEGORICAL:
            side_target = torch.as_tensor(side_values, dtype=torch.long)
        else:
            mu, sd = float(side_values.mean()), float(side_values.std()) or 1.0
            side_target = torch.as_tensor((side_values - mu) / sd, dtype=dtype)
            extra.update(side_mean=mu, side_std=sd)

    use_labeled = labeled_idx is not None and len(labeled_idx) > 0 and cfg.labeled_fraction_term > 0
    if use_labeled:
        x_lab = features[torch.as_tensor(labeled_idx, dtype=torch.long)]
        y_lab = torch.as_tensor(labels, dtype=torch.long)
        extra["n_labeled"] = int(len(labeled_idx))

    objective = _Objective(model, cfg, side_values, side_target, features)
    history = TrainHistory()
    n = len(data)
    eta = cfg.labeled_fraction_term if use_labeled else 0.0
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(len(COMPONENTS))
        lab_sum = 0.0
        n_steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            parts = objective.components(idx, gen, epoch, step)
            labeled = None
            if use_labeled:
                post = _encode(model, x_lab)
                noise = torch.randn(post.mean.shape, generator=gen, dtype=dtype)
                logits = model.score_logits(sample_latent(post, noise))
                labeled = F.cross_entropy(logits, y_lab)
            _guard(parts, labeled)
            total = weighted_total(parts, cfg.weights, labeled, eta)
            opt.zero_grad(set_to_none=False)
            total.backward()
            opt.step()
            sums += [float(p.detach()) for p in parts]
            lab_sum += float(labeled.detach()) if labeled is not None else 0.0
            n_steps += 1
        means = sums / n_steps
        record = total_loss(list(means), cfg.weights, labeled=lab_sum / n_steps, labeled_weight=eta)
        history.epochs.append(record)
        history.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d total=%.5f %s", epoch + 1, cfg.epochs, record.total,
                 " ".join(f"{c}={getattr(record, c):.4f}" for c in COMPONENTS))
    model.eval()
    return TrainedModel(model, cfg.weights, _manifest(spec, cfg, extra)), history


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig):
    """Train a fresh model on ``data``; returns ``(TrainedModel, TrainHistory)``.

    Evaluation labels of ``data`` are unreadable for the whole run.
    """
    with training_flow():
        return _fit(spec, data, cfg)


def train_semi_supervised(spec: ModelSpec, data: Dataset, cfg: TrainConfig,
                          labeled_idx, labels):
    """``train`` plus a cross-entropy between the score head and the given
    labels of the rows ``labeled_idx``, weighted by
    ``cfg.labeled_fraction_term``. Every step uses the whole labeled set.
    """
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labeled_idx.shape != labels.shape:
        raise ConfigError("labeled_idx and labels differ in length")
    if labeled_idx.size:
        if labeled_idx.min() < 0 or labeled_idx.max() >= len(data):
            raise ConfigError("labeled index out of range")
        if labels.min() < 0 or labels.max() >= spec.n_score_classes:
            raise ConfigError(f"labels must lie in [0, {spec.n_score_classes})")
    with training_flow():
        return _fit(spec, data, cfg, labeled_idx, labels)


def default_score_classes(data: Dataset) -> int:
    """Number of side classes for categorical side information, else 10."""
    if data.side is not None and data.side.kind == CATEGORICAL:
        return max(data.side.n_classes, 2)
    return 10
