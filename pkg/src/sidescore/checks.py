"""Numerical property suite for the divergence module.

Used by the ``divcheck`` command and by the test suite. Each check draws its
own random Gaussians from ``seed`` so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import torch

from .divergence import (GaussianDiag, geometric_interpolant, js_geo, js_geo_closed_form,
                         js_geo_quadrature_1d)

DIMS = (1, 2, 8)
FD_STEP = 1e-5
GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""
    gating: bool = True

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tag = "" if self.gating else " (informational)"
        return f"{self.name}: {status}{tag} worst={self.worst:.3e} {self.detail}".rstrip()


def random_gaussians(rng: np.random.Generator, n: int, d: int, mean_scale: float = 2.0,
                     log_var_range: float = np.log(4.0)) -> GaussianDiag:
    """``n`` Gaussians with means ~ N(0, mean_scale^2) and variances
    log-uniform in [exp(-r), exp(r)]."""
    mean = rng.normal(0.0, mean_scale, (n, d))
    var = np.exp(rng.uniform(-log_var_range, log_var_range, (n, d)))
    return GaussianDiag(torch.as_tensor(mean), torch.as_tensor(var))


def fd_gradient_rel_error(fn, params: list[torch.Tensor], step: float = FD_STEP) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` maps the parameter tensors to a scalar tensor. The relative error
    of one entry is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, GRAD_FLOOR)``.
    """
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for li, leaf in enumerate(leaves):
            g_auto = grads[li]
            if g_auto is None:
                g_auto = torch.zeros_like(leaf)
            flat = leaf.detach().clone().reshape(-1)
            for j in range(flat.numel()):
                args_plus = [l.detach().clone() for l in leaves]
                args_minus = [l.detach().clone() for l in leaves]
                args_plus[li].view(-1)[j] += step
                args_minus[li].view(-1)[j] -= step
                fd = (float(fn(*args_plus)) - float(fn(*args_minus))) / (2 * step)
                a = float(g_auto.reshape(-1)[j])
                err = abs(a - fd) / max(abs(a), abs(fd), GRAD_FLOOR)
                worst = max(worst, err)
    return worst


def check_endpoints(rng, n_trials, precision_weighted_mean=True) -> CheckResult:
    worst = 0.0
    for d in DIMS:
        p = random_gaussians(rng, n_trials, d)
        q = random_gaussians(rng, n_trials, d)
        for lam, target in ((0.0, p), (1.0, q)):
            g = geometric_interpolant(p, q, lam, precision_weighted_mean=precision_weighted_mean)
            err = max(float((g.mean - target.mean).abs().max()),
                      float(((g.var - target.var) / target.var).abs().max()))
            worst = max(worst, err)
    return CheckResult("interpolant_endpoints", worst <= 1e-12, worst, "lambda in {0, 1}")


def check_nonnegative(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    for d in DIMS:
        p, q = random_gaussians(rng, n_trials, d), random_gaussians(rng, n_trials, d)
        lam = torch.as_tensor(rng.uniform(0, 1, n_trials))
        vals = torch.stack([js_geo(p[i], q[i], float(lam[i]), **kw) for i in range(n_trials)])
        worst = max(worst, float((-vals).clamp_min(0).max()))
    return CheckResult("non_negativity", worst == 0.0, worst)


def check_identity(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    for d in DIMS:
        p = random_gaussians(rng, n_trials, d)
        for lam in (0.0, 0.3, 0.5, 1.0):
            worst = max(worst, float(js_geo(p, p, lam, **kw).abs().max()))
    return CheckResult("identity_exact_zero", worst == 0.0, worst)


def check_swap(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    for d in DIMS:
        p, q = random_gaussians(rng, n_trials, d), random_gaussians(rng, n_trials, d)
        for lam in rng.uniform(0, 1, 5):
            a = js_geo(p, q, float(lam), **kw)
            b = js_geo(q, p, 1.0 - float(lam), **kw)
            worst = max(worst, float((a - b).abs().max()))
    return CheckResult("swap_symmetry", worst <= 1e-9, worst, "|JS(p,q,l) - JS(q,p,1-l)|")


def check_closed_form(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    for d in DIMS:
        p, q = random_gaussians(rng, n_trials, d), random_gaussians(rng, n_trials, d)
        for lam in rng.uniform(0, 1, 5):
            a = js_geo(p, q, float(lam), **kw)
            b = js_geo_closed_form(p, q, float(lam))
            err = (a - b).abs() / torch.clamp_min(b.abs(), 1.0)
            worst = max(worst, float(err.max()))
    return CheckResult("closed_form_vs_composed", worst <= 1e-9, worst)


def check_quadrature(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    n = max(n_trials, 100)
    p, q = random_gaussians(rng, n, 1), random_gaussians(rng, n, 1)
    lams = rng.uniform(0, 1, n)
    for i in range(n):
        a = float(js_geo(p[i], q[i], float(lams[i]), **kw))
        b = js_geo_quadrature_1d(p[i], q[i], float(lams[i]))
        worst = max(worst, abs(a - b))
    return CheckResult("quadrature_oracle_1d", worst <= 1e-5, worst, f"{n} pairs")


def triangle_violations(rng, n_triples, lam=0.5, **kw) -> tuple[int, float, str]:
    """Count triples (A, B, C) with d(A,C) > d(A,B) + d(B,C) + 1e-9 where d
    is the square-root skew-geometric JS distance."""
    count, worst, example = 0, -np.inf, ""
    per_dim = -(-n_triples // len(DIMS))
    for d in DIMS:
        a, b, c = (random_gaussians(rng, per_dim, d) for _ in range(3))
        dist = lambda x, y: torch.sqrt(js_geo(x, y, lam, **kw).clamp_min(0))
        gap = dist(a, c) - dist(a, b) - dist(b, c)
        viol = gap > 1e-9
        count += int(viol.sum())
        i = int(torch.argmax(gap))
        if float(gap[i]) > worst:
            worst = float(gap[i])
            example = (f"d={d} A=({a.mean[i].tolist()}, {a.var[i].tolist()}) "
                       f"C=({c.mean[i].tolist()}, {c.var[i].tolist()})") if viol.any() else ""
    return count, worst, example


def check_triangle(rng, n_trials, gating=False, **kw) -> CheckResult:
    n = max(n_trials, 10_000)
    count, worst, example = triangle_violations(rng, n, **kw)
    detail = f"{count}/{n} violations"
    return CheckResult("triangle_inequality_lambda_0.5", count == 0, max(worst, 0.0), detail, gating)


def check_gradients(rng, n_trials, **kw) -> CheckResult:
    worst = 0.0
    for i in range(min(n_trials, 50)):
        d = DIMS[i % len(DIMS)]
        p, q = random_gaussians(rng, 1, d)[0], random_gaussians(rng, 1, d)[0]
        lam = float(rng.uniform(0.05, 0.95))

        def f(m1, v1, m2, v2):
            return js_geo(GaussianDiag(m1, v1), GaussianDiag(m2, v2), lam, **kw)

        worst = max(worst, fd_gradient_rel_error(f, [p.mean, p.var, q.mean, q.var]))
    return CheckResult("gradient_vs_finite_differences", worst <= GRAD_RTOL, worst)


def run_divergence_checks(n_trials: int = 200, seed: int = 0, *, broken_interpolant: bool = False,
                          strict_metric: bool = False) -> list[CheckResult]:
    """Run every property; ``broken_interpolant`` swaps in the mean formula
    without the covariance factor to show that the suite catches it."""
    kw = {"precision_weighted_mean": not broken_interpolant}
    results = []
    for i, check in enumerate((
        partial(check_endpoints, precision_weighted_mean=kw["precision_weighted_mean"]),
        partial(check_nonnegative, **kw),
        partial(check_identity, **kw),
        partial(check_swap, **kw),
        partial(check_closed_form, **kw),
        partial(check_quadrature, **kw),
        partial(check_gradients, **kw),
        partial(check_triangle, gating=strict_metric, **kw),
    )):
        rng = np.random.default_rng([seed, i])
        results.append(check(rng, n_trials))
    return results
