import numpy as np
import pytest
import torch

from sidescore import trainer as T
from sidescore.data import Dataset, SideInfo, make_blobs, split
from sidescore.divergence import sqrt_js_geo
from sidescore.losses import COMPONENTS, LossWeights, NonFiniteLossError, reconstruction_nll, weighted_total
from sidescore.model import ModelSpec, ScoreModel
from sidescore.trainer import ConfigError, TrainConfig, default_score_classes, train, train_semi_supervised
from sidescore.triplets import Augment

ONLY = {name: LossWeights(*(1.0 if i == k else 0.0 for i in range(5)))
        for k, name in enumerate(("alpha", "beta", "gamma", "delta", "zeta"))}


def blob_spec(train_ds, **kw):
    base = dict(input_kind="tabular", input_dim=2, latent_dim=2, hidden_layers=(32, 32),
                n_score_classes=4, side_kind="categorical", n_side_classes=4, head_hidden=32)
    base.update(kw)
    return ModelSpec(**base)


def cfg(**kw):
    base = dict(epochs=3, batch_size=32, seed=0, triplet_reduction="mean")
    base.update(kw)
    return TrainConfig(**base)


def assert_accounting(history, weights, eta=0.0):
    for r in history.epochs:
        parts = [getattr(r, c) for c in COMPONENTS]
        assert r.total == weighted_total(parts, weights, r.labeled, eta)


def test_all_zero_weights_leave_parameters(blob_splits):
    tr, _ = blob_splits
    spec = blob_spec(tr)
    torch.manual_seed(0)
    fresh = ScoreModel(spec)
    trained, hist = train(spec, tr, cfg(weights=LossWeights(0, 0, 0, 0, 0)))
    for (name, a), (_, b) in zip(fresh.state_dict().items(), trained.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert hist.totals() == [0.0] * 3


def test_reconstruction_only_decreases(blob_splits):
    tr, te = blob_splits
    spec = blob_spec(tr)
    trained, hist = train(spec, tr, cfg(epochs=5, weights=ONLY["alpha"], triplet_regime="off"))
    recon = hist.component("recon")
    assert all(b < a for a, b in zip(recon, recon[1:])), recon
    # decoding the posterior mean beats an untrained model on held-out rows
    torch.manual_seed(123)
    fresh = ScoreModel(spec)
    x = torch.as_tensor(te.features, dtype=torch.float32)
    with torch.no_grad():
        after = reconstruction_nll(x, trained.model.decode(trained.model.embed(x)), "gaussian_unit_var")
        before = reconstruction_nll(x, fresh.decode(fresh.embed(x)), "gaussian_unit_var")
    assert float(after) < float(before)


def test_triplet_only_separates_classes(blob_splits):
    tr, te = blob_splits
    trained, _ = train(blob_spec(tr), tr, cfg(epochs=10, weights=ONLY["gamma"]))
    with torch.no_grad():
        post = trained.model.encode(te.features)
    post = post.detach()
    labels = te.eval_labels
    i, j = np.triu_indices(len(te), 1)
    d = sqrt_js_geo(post[torch.as_tensor(i)], post[torch.as_tensor(j)]).numpy()
    same = labels[i] == labels[j]
    assert d[same].mean() < d[~same].mean()


def test_deterministic_history(blob_splits):
    tr, _ = blob_splits
    c = cfg(epochs=2, weights=LossWeights())
    _, h1 = train(blob_spec(tr), tr, c)
    _, h2 = train(blob_spec(tr), tr, c)
    assert h1.to_table() == h2.to_table()
    _, h3 = train(blob_spec(tr), tr, cfg(epochs=2, seed=1))
    assert h1.to_table() != h3.to_table()


@pytest.mark.parametrize("regime,side_kind", [("by_class", "categorical"), ("by_quantile", "continuous"),
                                              ("self_supervised", "categorical"), ("off", "categorical")])
def test_exact_accounting(blob_splits, regime, side_kind):
    tr, _ = blob_splits
    w = LossWeights(0.9, 1.1, 0.7, 1.3, 0.6, margin=1.5)
    if side_kind == "continuous":
        tr = Dataset(tr.features, SideInfo("continuous", tr.features[:, 0] * 3 + 1), None, "train")
        spec = blob_spec(tr, side_kind="continuous", n_side_classes=0)
    else:
        spec = blob_spec(tr)
    _, hist = train(spec, tr, cfg(weights=w, triplet_regime=regime, augment=Augment("jitter", 0.2)))
    assert len(hist.epochs) == 3 and len(hist.seconds) == 3
    assert all(np.isfinite(hist.totals()))
    assert_accounting(hist, w)


def test_nan_component_named(blob_splits, monkeypatch):
    tr, _ = blob_splits
    monkeypatch.setattr(T, "score_mi_loss", lambda probs: probs.sum() * float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train(blob_spec(tr), tr, cfg(epochs=1))
    assert info.value.component == "score"


def test_overflow_aborts_on_recon():
    ds = make_blobs(10, 2, 2)
    huge = ds.with_features(ds.features * 1e30)
    spec = ModelSpec(input_dim=2, n_score_classes=2, n_side_classes=2, hidden_layers=(4,))
    with pytest.raises(NonFiniteLossError, match="recon"):
        train(spec, huge, cfg(epochs=1, triplet_regime="off"))


class TestConfigErrors:
    def test_missing_side_with_delta(self):
        ds = Dataset(np.zeros((8, 2)))
        spec = ModelSpec(input_dim=2, n_score_classes=2, side_kind="none")
        with pytest.raises(ConfigError, match="delta"):
            train(spec, ds, cfg(triplet_regime="off"))
        with pytest.raises(ConfigError, match="side information"):
            train(spec, ds, cfg(weights=LossWeights(delta=0)))
        _, hist = train(spec, ds, cfg(epochs=1, triplet_regime="self_supervised", weights=LossWeights(delta=0)))
        assert hist.epochs[0].side == 0.0

    def test_non_finite_features(self, blob_splits):
        tr, _ = blob_splits
        x = tr.features.copy()
        x[3, 1] = np.inf
        with pytest.raises(ConfigError, match="infinite"):
            train(blob_spec(tr), tr.with_features(x), cfg())

    def test_feature_mismatch(self, blob_splits):
        tr, _ = blob_splits
        with pytest.raises(ConfigError):
            train(blob_spec(tr, input_dim=3), tr, cfg())

    def test_side_kind_mismatch(self, blob_splits):
        tr, _ = blob_splits
        with pytest.raises(ConfigError):
            train(blob_spec(tr, side_kind="continuous", n_side_classes=0), tr, cfg())
        with pytest.raises(ConfigError):
            train(blob_spec(tr, n_side_classes=3), tr, cfg())

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=1), dict(learning_rate=0),
                                    dict(triplet_regime="hard"), dict(triplet_reduction="max"),
                                    dict(dtype="float16"), dict(labeled_fraction_term=-1)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_batch_size_one_without_triplets(self):
        assert TrainConfig(batch_size=1, triplet_regime="off").batch_size == 1


class TestSemiSupervised:
    def test_zero_labels_reduce_to_train(self, blob_splits):
        tr, _ = blob_splits
        c = cfg(epochs=2)
        _, h0 = train(blob_spec(tr), tr, c)
        _, h1 = train_semi_supervised(blob_spec(tr), tr, c, [], [])
        assert h0.to_table() == h1.to_table()

    def test_weight_zero_matches_train(self, blob_splits):
        tr, _ = blob_splits
        c = cfg(epochs=2, labeled_fraction_term=0.0)
        _, h0 = train(blob_spec(tr), tr, c)
        _, h1 = train_semi_supervised(blob_spec(tr), tr, c, [0, 1, 2], [0, 1, 2])
        assert h0.to_table() == h1.to_table()

    def test_labeled_term_recorded(self, blob_splits):
        tr, _ = blob_splits
        idx = np.arange(20)
        c = cfg(epochs=2, labeled_fraction_term=2.0)
        _, hist = train_semi_supervised(blob_spec(tr), tr, c, idx, tr.side.values[idx])
        assert all(r.labeled > 0 for r in hist.epochs)
        assert_accounting(hist, c.weights, eta=2.0)

    def test_label_range(self, blob_splits):
        tr, _ = blob_splits
        with pytest.raises(ConfigError):
            train_semi_supervised(blob_spec(tr), tr, cfg(), [0], [4])
        with pytest.raises(ConfigError):
            train_semi_supervised(blob_spec(tr), tr, cfg(), [len(tr)], [0])
        with pytest.raises(ConfigError):
            train_semi_supervised(blob_spec(tr), tr, cfg(), [0, 1], [0])


def test_training_never_reads_eval_labels(blob_splits, monkeypatch):
    tr, _ = blob_splits
    reads = []
    original = Dataset.eval_labels

    def audited(self):
        reads.append(self.split_tag)
        return original.fget(self)

    monkeypatch.setattr(Dataset, "eval_labels", property(audited))
    train(blob_spec(tr), tr, cfg(epochs=1))
    assert reads == []


def test_manifest_records_choices(blob_splits):
    tr, _ = blob_splits
    trained, _ = train(blob_spec(tr), tr, cfg(epochs=1))
    m = trained.manifest
    assert m["optimizer"].startswith("Adam")
    assert m["train"]["seed"] == 0 and m["train"]["weights"]["gamma"] == 1.0
    assert m["model"]["activation"] == "relu" and "init" in m["model"]


def test_history_table(blob_splits):
    tr, _ = blob_splits
    _, hist = train(blob_spec(tr), tr, cfg(epochs=2))
    lines = hist.to_table().splitlines()
    assert lines[0].split("\t") == ["epoch", *COMPONENTS, "labeled", "total"]
    assert float(lines[2].split("\t")[-1]) == hist.totals()[1]


def test_default_score_classes():
    assert default_score_classes(make_blobs(3, 5, 2)) == 5
    assert default_score_classes(Dataset(np.zeros((3, 2)))) == 10
