"""Run configuration, data preparation and evaluation shared by the CLI and
the acceptance tests.

A run config is an INI file with ``[data]``, ``[model]``, ``[train]`` and
``[weights]`` sections. ``materialize`` fills in every default so that the
written manifest is itself a complete config.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .evaluation import (align_score_order, cluster_accuracy, eval_labels_of, expected_score,
                         pearson_r, quantile_classes)
from .losses import LossWeights, side_nll
from .model import ModelSpec, TrainedModel
from .trainer import ConfigError, TrainConfig, default_score_classes
from .triplets import Augment

DATA_DEFAULTS = {
    "source": "blobs",
    # blobs
    "n_per_class": "100", "n_classes": "4", "dim": "2", "spread": "0.5", "data_seed": "0",
    # idx
    "images": "", "labels": "", "test_images": "", "test_labels": "", "side_map": "pure",
    "subset": "0", "subset_seed": "0", "n_labeled": "0",
    # csv
    "path": "", "schema": "", "side_kind": "continuous",
    "test_fraction": "0.25", "split_seed": "0",
}

MODEL_DEFAULTS = {"latent_dim": "2", "hidden_layers": "64,64", "n_score_classes": "0",
                  "head_hidden": "64"}

BUILTIN_SCHEMAS = {"parkinson": D.PARKINSON_SCHEMA, "student": D.STUDENT_SCHEMA}


def read_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(cp.sections()) - {"data", "model", "train", "weights", "run"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return cp


def _section(cp, name, defaults) -> dict:
    out = dict(defaults)
    if cp.has_section(name):
        for k, v in cp.items(name):
            if defaults and k not in defaults:
                raise ConfigError(f"[{name}] unknown key {k!r}")
            out[k] = v
    return out


def _num(section: str, key: str, value: str, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {value!r} is not a valid {kind.__name__}") from None


def weights_from(cp) -> LossWeights:
    defaults = {f.name: str(f.default) for f in fields(LossWeights)}
    sec = _section(cp, "weights", defaults)
    try:
        return LossWeights(**{k: _num("weights", k, v) for k, v in sec.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config_from(cp) -> TrainConfig:
    base = TrainConfig()
    defaults = {
        "epochs": str(base.epochs), "batch_size": str(base.batch_size),
        "learning_rate": str(base.learning_rate), "seed": str(base.seed),
        "triplet_regime": base.triplet_regime, "n_triplets": "0",
        "triplet_reduction": base.triplet_reduction, "n_bins": str(base.n_bins),
        "augment_kind": base.augment.kind, "augment_strength": str(base.augment.strength),
        "labeled_fraction_term": str(base.labeled_fraction_term), "dtype": base.dtype,
    }
    s = _section(cp, "train", defaults)
    try:
        return TrainConfig(
            epochs=_num("train", "epochs", s["epochs"], int),
            batch_size=_num("train", "batch_size", s["batch_size"], int),
            learning_rate=_num("train", "learning_rate", s["learning_rate"]),
            seed=_num("train", "seed", s["seed"], int),
            weights=weights_from(cp),
            triplet_regime=s["triplet_regime"],
            n_triplets=_num("train", "n_triplets", s["n_triplets"], int) or None,
            triplet_reduction=s["triplet_reduction"],
            n_bins=_num("train", "n_bins", s["n_bins"], int),
            augment=Augment(s["augment_kind"], _num("train", "augment_strength", s["augment_strength"])),
            labeled_fraction_term=_num("train", "labeled_fraction_term", s["labeled_fraction_term"]),
            dtype=s["dtype"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class PreparedData:
    train: D.Dataset
    test: D.Dataset
    labeled_idx: np.ndarray      # rows of ``train`` with a revealed label (semi-supervised)
    labeled_y: np.ndarray


def _resolve(path: str, base: Path) -> Path:
    p = Path(os.path.expandvars(path))
    return p if p.is_absolute() else (base / p)


def prepare_data(cp, base_dir=".") -> PreparedData:
    """Build train/test datasets from the ``[data]`` section.

    Relative paths resolve against ``base_dir`` (the config's directory).
    """
    s = _section(cp, "data", DATA_DEFAULTS)
    base = Path(base_dir)
    source = s["source"]
    split_seed = _num("data", "split_seed", s["split_seed"], int)
    test_fraction = _num("data", "test_fraction", s["test_fraction"])
    if not 0 < test_fraction < 1:
        raise ConfigError("[data] test_fraction must lie in (0, 1)")

    if source == "blobs":
        ds = D.make_blobs(_num("data", "n_per_class", s["n_per_class"], int),
                          _num("data", "n_classes", s["n_classes"], int),
                          _num("data", "dim", s["dim"], int),
                          _num("data", "spread", s["spread"]),
                          _num("data", "data_seed", s["data_seed"], int))
        train, test = D.split(ds, (1.0 - test_fraction,), split_seed)
    elif source == "idx":
        if not s["images"] or not s["labels"]:
            raise ConfigError("[data] idx source needs images and labels")
        full = D.load_idx(_resolve(s["images"], base), _resolve(s["labels"], base))
        subset = _num("data", "subset", s["subset"], int)
        if subset and subset < len(full):
            rows = np.sort(np.random.default_rng(_num("data", "subset_seed", s["subset_seed"], int))
                           .choice(len(full), subset, replace=False))
            full = full.take(rows)
        side = D.side_map(full.eval_labels, s["side_map"])
        full = D.Dataset(full.features, side, full.eval_labels, "all", full.input_kind)
        if s["test_images"]:
            test = D.load_idx(_resolve(s["test_images"], base), _resolve(s["test_labels"], base))
            test = D.Dataset(test.features, D.side_map(test.eval_labels, s["side_map"]),
                             test.eval_labels, "test", test.input_kind)
            train = D.Dataset(full.features, full.side, full.eval_labels, "train", full.input_kind)
        else:
            train, test = D.split(full, (1.0 - test_fraction,), split_seed, standardize_features=False)
    elif source == "csv":
        if not s["path"]:
            raise ConfigError("[data] csv source needs a path")
        schema_ref = s["schema"]
        if schema_ref.startswith("builtin:"):
            key = schema_ref.split(":", 1)[1]
            if key not in BUILTIN_SCHEMAS:
                raise ConfigError(f"unknown builtin schema {key!r}")
            schema = BUILTIN_SCHEMAS[key]
        elif schema_ref:
            schema = D.read_schema(_resolve(schema_ref, base))
        else:
            raise ConfigError("[data] csv source needs a schema")
        ds = D.load_tabular_csv(_resolve(s["path"], base), schema, side_kind=s["side_kind"])
        train, test = D.split(ds, (1.0 - test_fraction,), split_seed)
    else:
        raise ConfigError(f"[data] unknown source {source!r}")

    n_labeled = _num("data", "n_labeled", s["n_labeled"], int)
    labeled_idx = np.zeros(0, dtype=np.int64)
    labeled_y = np.zeros(0, dtype=np.int64)
    if n_labeled:
        # revealed labels are chosen class-balanced when possible
        y = train.eval_labels
        rng = np.random.default_rng(split_seed + 1)
        classes = np.unique(y)
        per = max(n_labeled // classes.size, 1)
        picks = [rng.choice(np.flatnonzero(y == c), min(per, int((y == c).sum())), replace=False)
                 for c in classes]
        labeled_idx = np.sort(np.concatenate(picks))[:n_labeled]
        labeled_y = y[labeled_idx].astype(np.int64)
    return PreparedData(train, test, labeled_idx, labeled_y)


def model_spec_from(cp, train: D.Dataset) -> ModelSpec:
    s = _section(cp, "model", MODEL_DEFAULTS)
    try:
        hidden = tuple(int(h) for h in s["hidden_layers"].split(",") if h.strip())
    except ValueError:
        raise ConfigError("[model] hidden_layers must be comma-separated integers") from None
    k = _num("model", "n_score_classes", s["n_score_classes"], int) or default_score_classes(train)
    if train.side is None:
        side_kind, n_side = "none", 0
    else:
        side_kind = train.side.kind
        n_side = train.side.n_classes if side_kind == "categorical" else 0
    try:
        return ModelSpec(
            input_kind=train.input_kind,
            input_dim=train.features.shape[1],
            latent_dim=_num("model", "latent_dim", s["latent_dim"], int),
            hidden_layers=hidden,
            n_score_classes=k,
            side_kind=side_kind,
            n_side_classes=n_side,
            head_hidden=_num("model", "head_hidden", s["head_hidden"], int),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def materialize(cp, spec: ModelSpec, cfg: TrainConfig) -> configparser.ConfigParser:
    """A config with every default written out, usable to rerun the run."""
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    out["data"] = _section(cp, "data", DATA_DEFAULTS)
    out["model"] = {
        "latent_dim": str(spec.latent_dim),
        "hidden_layers": ",".join(map(str, spec.hidden_layers)),
        "n_score_classes": str(spec.n_score_classes),
        "head_hidden": str(spec.head_hidden),
    }
    out["train"] = {
        "epochs": str(cfg.epochs), "batch_size": str(cfg.batch_size),
        "learning_rate": repr(cfg.learning_rate), "seed": str(cfg.seed),
        "triplet_regime": cfg.triplet_regime, "n_triplets": str(cfg.n_triplets or 0),
        "triplet_reduction": cfg.triplet_reduction, "n_bins": str(cfg.n_bins),
        "augment_kind": cfg.augment.kind, "augment_strength": repr(cfg.augment.strength),
        "labeled_fraction_term": repr(cfg.labeled_fraction_term), "dtype": cfg.dtype,
    }
    out["weights"] = {k: repr(v) for k, v in cfg.weights.as_dict().items()}
    return out


@torch.no_grad()
def evaluate(trained: TrainedModel, train: D.Dataset, test: D.Dataset) -> dict:
    """Score-quality metrics of ``trained`` on ``test``.

    Score classes are ordered by the training split's side information; the
    test labels are read only here, after all predictions are made.
    """
    model = trained.model
    spec = trained.spec
    k = spec.n_score_classes

    z_test = model.embed(test.features)
    probs = model.predict_score(z_test).cpu().numpy().astype(np.float64)
    hard = np.argmax(probs, axis=1)
    metrics: dict = {"n_test": len(test), "n_score_classes": k}

    alignment = None
    if train.side is not None:
        train_hard = model.hard_score(train.features)
        alignment = align_score_order(train_hard, train.side.values, k)

    if test.side is not None and model.side_head is not None:
        pred = model.predict_side(z_test)
        if spec.side_kind == "categorical":
            side_probs = pred.double()
            metrics["side_accuracy"] = float((side_probs.argmax(1).numpy() == test.side.values).mean())
            metrics["side_nll"] = float(side_nll(side_probs / side_probs.sum(1, keepdim=True),
                                                 test.side.values))
        else:
            mu = float(trained.manifest.get("side_mean", 0.0))
            sd = float(trained.manifest.get("side_std", 1.0))
            mean = pred[0].double() * sd + mu
            var = pred[1].double() * sd * sd
            metrics["side_nll"] = float(side_nll((mean, var), test.side.values, "continuous"))
            metrics["side_pearson_r"] = pearson_r(mean.numpy(), test.side.values).r

    labels = eval_labels_of(test)
    integral = np.all(labels == np.round(labels))
    if np.issubdtype(labels.dtype, np.integer) or (integral and np.unique(labels).size <= k):
        label_classes = labels.astype(np.int64)
        continuous_target = False
    else:
        label_classes = quantile_classes(labels, k)
        continuous_target = True
    metrics["cluster_accuracy"] = cluster_accuracy(hard, label_classes)

    if alignment is not None:
        ordinal = expected_score(probs, alignment)
        if np.ptp(ordinal) > 0 and np.ptp(labels) > 0:
            corr = pearson_r(ordinal, labels)
            metrics["pearson_r"] = corr.r
            metrics["pearson_p"] = corr.p_value
        else:
            metrics["pearson_r"] = float("nan")
            metrics["pearson_p"] = float("nan")
        if continuous_target:
            # score and target each cut into k equal-count ordinal classes
            hit = quantile_classes(ordinal, k) == label_classes
            metrics["quantile_bin_accuracy"] = float(hit.mean())
    if np.ptp(hard) > 0 and np.ptp(labels) > 0:
        metrics["pearson_r_abs_raw"] = abs(pearson_r(hard, labels).r)
    else:
        metrics["pearson_r_abs_raw"] = float("nan")
    return metrics
