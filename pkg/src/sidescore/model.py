"""Stochastic encoder, decoder and the two latent heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .divergence import VAR_FLOOR, GaussianDiag
from .losses import LossWeights

INPUT_KINDS = ("tabular", "image_28x28")
SIDE_KINDS = ("categorical", "continuous", "none")
CHECKPOINT_FORMAT = "sidescore-checkpoint-1"


@dataclass(frozen=True)
class ModelSpec:
    input_kind: str = "tabular"
    input_dim: int = 2
    latent_dim: int = 2
    hidden_layers: tuple[int, ...] = (64, 64)
    n_score_classes: int = 10
    side_kind: str = "categorical"
    n_side_classes: int = 0
    head_hidden: int = 64
    activation: str = "relu"
    init: str = "torch-default (kaiming-uniform)"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        if self.input_kind == "image_28x28" and self.input_dim != 784:
            raise ValueError("image_28x28 inputs have input_dim 784")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if not self.hidden_layers or any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden_layers must be a non-empty list of positive sizes")
        if self.n_score_classes < 2:
            raise ValueError("n_score_classes must be >= 2")
        if self.side_kind not in SIDE_KINDS:
            raise ValueError(f"side_kind must be one of {SIDE_KINDS}")
        if self.side_kind == "categorical" and self.n_side_classes < 2:
            raise ValueError("categorical side information needs n_side_classes >= 2")
        if self.activation != "relu":
            raise ValueError("only relu activations are implemented")

    @property
    def likelihood(self) -> str:
        return "bernoulli" if self.input_kind == "image_28x28" else "gaussian_unit_var"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _mlp(sizes, final_activation=False) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or final_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ScoreModel(nn.Module):
    """Encoder q(z|x) with reconstruction, side-information and score branches.

    Both heads read only the latent vector; side information never enters
    the network.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        h = spec.hidden_layers
        if spec.input_kind == "image_28x28":
            self.trunk = nn.Sequential(
                nn.Unflatten(1, (1, 28, 28)),
                nn.Conv2d(1, 32, 4, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.ReLU(),
                nn.Flatten(),
                nn.Linear(64 * 7 * 7, h[0]), nn.ReLU(),
            )
            self.decoder = nn.Sequential(
                nn.Linear(spec.latent_dim, h[0]), nn.ReLU(),
                nn.Linear(h[0], 64 * 7 * 7), nn.ReLU(),
                nn.Unflatten(1, (64, 7, 7)),
                nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
                nn.ConvTranspose2d(32, 1, 4, stride=2, padding=1),
                nn.Flatten(),
            )
        else:
            self.trunk = _mlp((spec.input_dim,) + h, final_activation=True)
            self.decoder = _mlp((spec.latent_dim,) + h[::-1] + (spec.input_dim,))
        self.mean_head = nn.Linear(h[-1] if spec.input_kind == "tabular" else h[0], spec.latent_dim)
        self.var_head = nn.Linear(self.mean_head.in_features, spec.latent_dim)

        hh = spec.head_hidden
        self.score_head = _mlp((spec.latent_dim, hh, spec.n_score_classes))
        if spec.side_kind == "categorical":
            self.side_head = _mlp((spec.latent_dim, hh, spec.n_side_classes))
        elif spec.side_kind == "continuous":
            self.side_head = _mlp((spec.latent_dim, hh, 2))
        else:
            self.side_head = None

    @property
    def dtype(self) -> torch.dtype:
        return self.mean_head.weight.dtype

    def _as_input(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.dtype) if not isinstance(x, torch.Tensor) else x.to(self.dtype)
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.dim() != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected inputs with {self.spec.input_dim} features, got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("inputs must be finite")
        return x

    def _as_latent(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=self.dtype) if not isinstance(z, torch.Tensor) else z
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.spec.latent_dim:
            raise ValueError(f"latent vectors must have {self.spec.latent_dim} entries")
        return z

    def encode(self, x) -> GaussianDiag:
        hidden = self.trunk(self._as_input(x))
        var = F.softplus(self.var_head(hidden)) + VAR_FLOOR
        return GaussianDiag(self.mean_head(hidden), var)

    def decode_logits(self, z) -> torch.Tensor:
        return self.decoder(self._as_latent(z))

    def decode(self, z) -> torch.Tensor:
        """Bernoulli probabilities for images, Gaussian means for tables."""
        out = self.decode_logits(z)
        return torch.sigmoid(out) if self.spec.input_kind == "image_28x28" else out

    def side_logits(self, z) -> torch.Tensor:
        if self.side_head is None:
            raise ValueError("model was built without a side-information head")
        return self.side_head(self._as_latent(z))

    def predict_side(self, z):
        """Simplex over side classes, or a ``(mean, var)`` pair."""
        out = self.side_logits(z)
        if self.spec.side_kind == "categorical":
            return torch.softmax(out, -1)
        return out[:, 0], F.softplus(out[:, 1]) + VAR_FLOOR

    def score_logits(self, z) -> torch.Tensor:
        return self.score_head(self._as_latent(z))

    def predict_score(self, z) -> torch.Tensor:
        return torch.softmax(self.score_logits(z), -1)

    @torch.no_grad()
    def embed(self, x) -> torch.Tensor:
        return self.encode(x).mean

    @torch.no_grad()
    def hard_score(self, x) -> np.ndarray:
        """Argmax score class at the posterior mean; ties go to the lowest index."""
        probs = self.predict_score(self.embed(x)).cpu().numpy()
        return np.argmax(probs, axis=1)


def sample_latent(post: GaussianDiag, noise: torch.Tensor) -> torch.Tensor:
    """Location-scale reparameterization ``mean + sqrt(var) * noise``."""
    noise = torch.as_tensor(noise, dtype=post.mean.dtype)
    if noise.shape != post.mean.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(post.mean.shape)}")
    return post.mean + torch.sqrt(post.var) * noise


@dataclass
class TrainedModel:
    model: ScoreModel
    weights: LossWeights
    manifest: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec


def save_checkpoint(path, trained: TrainedModel) -> None:
    """Write spec, loss weights, parameters and run manifest to one file."""
    for name, t in trained.model.state_dict().items():
        if not torch.isfinite(t).all():
            raise ValueError(f"refusing to save non-finite parameter {name}")
    blob = {
        "format": CHECKPOINT_FORMAT,
        "spec": json.dumps(trained.spec.to_dict(), sort_keys=True),
        "weights": json.dumps(trained.weights.as_dict(), sort_keys=True),
        "manifest": json.dumps(trained.manifest, sort_keys=True, default=str),
        "dtype": str(trained.model.dtype).replace("torch.", ""),
        "state": trained.model.state_dict(),
    }
    torch.save(blob, Path(path))


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint of format {CHECKPOINT_FORMAT}")
    spec = ModelSpec.from_dict(json.loads(blob["spec"]))
    model = ScoreModel(spec).to(getattr(torch, blob["dtype"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return TrainedModel(model, LossWeights(**json.loads(blob["weights"])), json.loads(blob["manifest"]))
