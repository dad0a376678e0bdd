"""Divergences between diagonal Gaussians.

Everything here is written against torch tensors so that the same code
serves the training graph (autograd) and the numerical checks (float64).
A ``GaussianDiag`` may hold a single distribution (shape ``(d,)``) or a
batch (shape ``(n, d)``); reductions always run over the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

VAR_FLOOR = 1e-8
DEFAULT_SKEW = 0.5


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class GaussianDiag:
    """Diagonal-covariance Gaussian. ``var`` is the variance, not the std."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        mean = _as_tensor(self.mean)
        var = _as_tensor(self.var)
        if mean.dim() == 0:
            mean = mean.reshape(1)
        if var.dim() == 0:
            var = var.reshape(1)
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {tuple(mean.shape)} != var shape {tuple(var.shape)}")
        if mean.shape[-1] < 1:
            raise ValueError("Gaussian dimension must be >= 1")
        with torch.no_grad():
            if not torch.isfinite(mean).all():
                raise ValueError("mean entries must be finite")
            if not torch.isfinite(var).all() or (var <= 0).any():
                raise ValueError("variance entries must be finite and strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    @classmethod
    def standard(cls, d: int, dtype=torch.float64) -> "GaussianDiag":
        return cls(torch.zeros(d, dtype=dtype), torch.ones(d, dtype=dtype))

    def __getitem__(self, idx) -> "GaussianDiag":
        return GaussianDiag(self.mean[idx], self.var[idx])

    def detach(self) -> "GaussianDiag":
        return GaussianDiag(self.mean.detach(), self.var.detach())


def _check_pair(p: GaussianDiag, q: GaussianDiag):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def _check_skew(lam: float):
    if not 0.0 <= float(lam) <= 1.0:
        raise ValueError(f"skew parameter must lie in [0, 1], got {lam}")


def _floored(var: torch.Tensor) -> torch.Tensor:
    return var.clamp_min(VAR_FLOOR)


def kl_diag(p: GaussianDiag, q: GaussianDiag) -> torch.Tensor:
    """KL(p || q), summed over dimensions."""
    _check_pair(p, q)
    vp, vq = _floored(p.var), _floored(q.var)
    terms = vp / vq + (q.mean - p.mean) ** 2 / vq - 1.0 + torch.log(vq) - torch.log(vp)
    return 0.5 * terms.sum(-1)


def geometric_interpolant(p: GaussianDiag, q: GaussianDiag, lam: float = DEFAULT_SKEW,
                          *, precision_weighted_mean: bool = True) -> GaussianDiag:
    """Normalized weighted geometric mean p^(1-lam) q^lam, itself Gaussian.

    The mean is the precision-weighted combination of the two means.
    ``precision_weighted_mean=False`` drops the final covariance factor and
    exists only so the property checker can demonstrate that the endpoints
    then stop matching.
    """
    _check_pair(p, q)
    _check_skew(lam)
    prec1, prec2 = 1.0 / _floored(p.var), 1.0 / _floored(q.var)
    prec = (1.0 - lam) * prec1 + lam * prec2
    var = 1.0 / prec
    eta = (1.0 - lam) * prec1 * p.mean + lam * prec2 * q.mean
    mean = var * eta if precision_weighted_mean else eta
    return GaussianDiag(mean, var)


def _same_mask(p: GaussianDiag, q: GaussianDiag) -> torch.Tensor:
    return (p.mean == q.mean) & (p.var == q.var)


def js_geo(p: GaussianDiag, q: GaussianDiag, lam: float = DEFAULT_SKEW,
           *, precision_weighted_mean: bool = True) -> torch.Tensor:
    """Skew-geometric Jensen-Shannon divergence via its two KL terms.

    Coordinates where p and q coincide contribute exactly zero, so
    ``js_geo(p, p) == 0`` holds bit-exactly instead of up to rounding.
    """
    g = geometric_interpolant(p, q, lam, precision_weighted_mean=precision_weighted_mean)
    vg = g.var

    def kl_terms(m, v):
        v = _floored(v)
        return 0.5 * (v / vg + (g.mean - m) ** 2 / vg - 1.0 + torch.log(vg) - torch.log(v))

    per_dim = (1.0 - lam) * kl_terms(p.mean, p.var) + lam * kl_terms(q.mean, q.var)
    per_dim = torch.where(_same_mask(p, q), torch.zeros_like(per_dim), per_dim)
    return per_dim.sum(-1)


def js_geo_closed_form(p: GaussianDiag, q: GaussianDiag, lam: float = DEFAULT_SKEW) -> torch.Tensor:
    """Single-expression closed form of ``js_geo`` (trace + log-det + two
    Mahalanobis terms - d), specialised to diagonal covariances."""
    g = geometric_interpolant(p, q, lam)
    v1, v2, vg = _floored(p.var), _floored(q.var), g.var
    trace = ((1.0 - lam) * v1 + lam * v2) / vg
    logdet = torch.log(vg) - (1.0 - lam) * torch.log(v1) - lam * torch.log(v2)
    maha = (1.0 - lam) * (g.mean - p.mean) ** 2 / vg + lam * (g.mean - q.mean) ** 2 / vg
    per_dim = trace + logdet + maha - 1.0
    per_dim = torch.where(_same_mask(p, q), torch.zeros_like(per_dim), per_dim)
    return 0.5 * per_dim.sum(-1)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; route zeros (identical inputs) around it
    pos = x > 0
    safe = torch.where(pos, x, torch.ones_like(x))
    return torch.where(pos, torch.sqrt(safe), torch.zeros_like(x))


def sqrt_js_geo(p: GaussianDiag, q: GaussianDiag, lam: float = DEFAULT_SKEW) -> torch.Tensor:
    """Square root of ``js_geo``; the distance used by the triplet loss."""
    return _safe_sqrt(js_geo(p, q, lam))


def _to_numpy_1d(g: GaussianDiag) -> tuple[np.ndarray, np.ndarray]:
    return (g.mean.detach().cpu().numpy().astype(np.float64).reshape(-1),
            g.var.detach().cpu().numpy().astype(np.float64).reshape(-1))


def _diag_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (((x - mean) ** 2) / var + np.log(2 * np.pi * var)).sum(-1)


def js_mixture_mc(p: GaussianDiag, q: GaussianDiag, n_samples: int = 100_000,
                  seed: int = 0) -> float:
    """Monte-Carlo estimate of the ordinary (arithmetic-mixture) JS divergence.

    Samples are drawn from the mixture M = (P + Q)/2, stratified half from
    each component, and averaged through the integrand
    ``(a log a + b log b) / 2`` with ``a = p/m``, ``b = q/m``. Because
    ``a + b = 2`` every summand lies in [0, log 2], so the estimate does too,
    and it is 0 up to log-sum-exp rounding when P = Q.
    """
    _check_pair(p, q)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mp, vp = _to_numpy_1d(p)
    mq, vq = _to_numpy_1d(q)
    rng = np.random.default_rng(seed)
    if n_samples == 1:
        n_p = int(rng.integers(2))
    else:
        n_p = (n_samples + 1) // 2
    n_q = n_samples - n_p
    xs = np.concatenate([
        mp + np.sqrt(vp) * rng.standard_normal((n_p, mp.size)),
        mq + np.sqrt(vq) * rng.standard_normal((n_q, mq.size)),
    ])
    lp = _diag_logpdf(xs, mp, vp)
    lq = _diag_logpdf(xs, mq, vq)
    lm = np.logaddexp(lp, lq) - np.log(2.0)
    a = np.exp(lp - lm)
    b = np.exp(lq - lm)
    vals = 0.5 * (a * (lp - lm) + b * (lq - lm))
    if n_samples == 1:
        est = vals[0]
    else:
        # one stratum per mixture component, each carrying half of M
        est = 0.5 * vals[:n_p].mean() + 0.5 * vals[n_p:].mean()
    return float(min(max(est, 0.0), math.log(2.0)))


def js_geo_quadrature_1d(p: GaussianDiag, q: GaussianDiag, lam: float = DEFAULT_SKEW,
                         grid_points: int = 20_001) -> float:
    """Numerical-integration oracle for ``js_geo`` in one dimension.

    The geometric-mean density is formed pointwise from the two densities
    and normalised numerically, so nothing here relies on it being Gaussian.
    """
    _check_pair(p, q)
    _check_skew(lam)
    if p.dim != 1 or p.mean.dim() != 1:
        raise ValueError("quadrature oracle is defined for a single 1-D Gaussian pair")
    (m1,), (v1,) = _to_numpy_1d(p)
    (m2,), (v2,) = _to_numpy_1d(q)
    s1, s2 = math.sqrt(v1), math.sqrt(v2)
    lo = min(m1 - 14 * s1, m2 - 14 * s2)
    hi = max(m1 + 14 * s1, m2 + 14 * s2)
    x = np.linspace(lo, hi, grid_points)
    lp = -0.5 * ((x - m1) ** 2 / v1 + np.log(2 * np.pi * v1))
    lq = -0.5 * ((x - m2) ** 2 / v2 + np.log(2 * np.pi * v2))
    lg = (1.0 - lam) * lp + lam * lq
    from scipy.integrate import simpson

    shift = lg.max()
    log_z = shift + math.log(simpson(np.exp(lg - shift), x=x))
    lg = lg - log_z
    integrand = (1.0 - lam) * np.exp(lp) * (lp - lg) + lam * np.exp(lq) * (lq - lg)
    return float(simpson(integrand, x=x))
