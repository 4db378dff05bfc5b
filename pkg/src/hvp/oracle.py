"""Closed-form and Monte-Carlo ground truth for small instances."""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import autodiff as ad
from .diffusion import Denoiser, GmmPrior, NoiseSchedule, unguided_chain
from .errors import DimensionError, NumericError, ParameterError, ToleranceError
from .tasks import ForwardTask, dense_task, log_likelihood

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianLinearInstance:
    """``x0 ~ N(mu0, diag(var0))``, ``y = A x0 + sigma_y z``."""

    mu0: np.ndarray
    var0: np.ndarray
    A: np.ndarray
    sigma_y: float
    y: np.ndarray

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=np.float64))
        var0 = np.broadcast_to(np.asarray(self.var0, dtype=np.float64), mu0.shape).copy()
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if A.shape != (len(y), len(mu0)):
            raise DimensionError(f"A has shape {A.shape}, expected {(len(y), len(mu0))}")
        if np.any(var0 <= 0):
            raise ParameterError("prior variances must be positive")
        if self.sigma_y < 0:
            raise ParameterError("sigma_y must be nonnegative")
        for k, v in (("mu0", mu0), ("var0", var0), ("A", A), ("y", y)):
            object.__setattr__(self, k, v)

    @property
    def d(self) -> int:
        return len(self.mu0)

    @property
    def m(self) -> int:
        return len(self.y)

    def task(self) -> ForwardTask:
        return dense_task(self.A, self.sigma_y)

    def with_y(self, y) -> "GaussianLinearInstance":
        return GaussianLinearInstance(self.mu0, self.var0, self.A, self.sigma_y, y)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mu0, self.var0, self.A, self.y, np.array([self.sigma_y])):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _marginal_cov(inst: GaussianLinearInstance) -> np.ndarray:
    return (inst.A * inst.var0) @ inst.A.T + inst.sigma_y ** 2 * np.eye(inst.m)


def _cho(C: np.ndarray):
    try:
        return cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("observation covariance is singular") from exc


def log_evidence(inst: GaussianLinearInstance) -> float:
    """``log N(y; A mu0, A Sigma0 A^T + sigma_y^2 I)`` via a Cholesky factor."""
    C = _marginal_cov(inst)
    fac = _cho(C)
    r = inst.y - inst.A @ inst.mu0
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    return float(-0.5 * (r @ cho_solve(fac, r) + logdet + inst.m * LOG_2PI))


def posterior_moments(inst: GaussianLinearInstance) -> tuple[np.ndarray, np.ndarray]:
    """Exact conjugate posterior mean and covariance of ``x0 | y``."""
    fac = _cho(_marginal_cov(inst))
    SAt = inst.var0[:, None] * inst.A.T
    mean = inst.mu0 + SAt @ cho_solve(fac, inst.y - inst.A @ inst.mu0)
    cov = np.diag(inst.var0) - SAt @ cho_solve(fac, SAt.T)
    return mean, 0.5 * (cov + cov.T)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    fac = _cho(cov)
    r = x - mean
    quad = np.sum(r * cho_solve(fac, r.T).T, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    return -0.5 * (quad + logdet + len(mean) * LOG_2PI)


def bayes_identity_gap(inst: GaussianLinearInstance, x0: np.ndarray) -> np.ndarray:
    """``log p(y) + log p(x0|y) - log p(x0) - log p(y|x0)``; zero up to rounding."""
    x0 = np.atleast_2d(x0)
    mean, cov = posterior_moments(inst)
    lp_post = gaussian_logpdf(x0, mean, cov)
    lp_prior = gaussian_logpdf(x0, inst.mu0, np.diag(inst.var0))
    lp_lik = ad.value(log_likelihood(inst.task(), inst.y, x0))
    return log_evidence(inst) + lp_post - lp_prior - lp_lik


def chain_marginal(prior: GmmPrior, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and per-coordinate variance of ``x0`` from the unguided chain under a 1-component prior.

    With a Gaussian prior every reverse step is affine in ``x_t`` plus
    isotropic noise, so the chain output is Gaussian.
    """
    if prior.K != 1:
        raise ParameterError("chain marginal is closed-form only for a single Gaussian component")
    m, v = prior.means[0], float(prior.variances[0])
    mean, var = np.zeros(prior.d), 1.0
    for t in range(sched.T, 0, -1):
        a, s, a_prev = float(sched.a[t]), float(sched.s[t]), float(sched.a[t - 1])
        g = a * v / (a * a * v + s * s)
        c = sched.det_coef(t)
        # x0_hat = m + g (x - a m); mean = a_prev x0_hat + c (x - a x0_hat) / s
        slope = (a_prev - c * a / s) * g + c / s
        offset = (a_prev - c * a / s) * (m - g * a * m)
        mean = slope * mean + offset
        var = slope * slope * var + float(sched.rsigma[t - 1]) ** 2
    return mean, var


def chain_instance(prior: GmmPrior, sched: NoiseSchedule, A, sigma_y: float, y) -> GaussianLinearInstance:
    """Gaussian-linear instance whose evidence is that of the generative chain."""
    mean, var = chain_marginal(prior, sched)
    return GaussianLinearInstance(mean, np.full(prior.d, var), A, sigma_y, y)


def _log_post_weights(prior: GmmPrior, a: float, s: float, x_t: float, grid: np.ndarray) -> np.ndarray:
    lp = prior.log_density(grid[:, None])
    return lp - 0.5 * (x_t - a * grid) ** 2 / (s * s)


def _trapezoid_mean(grid: np.ndarray, logw: np.ndarray) -> float:
    w = np.exp(logw - logw.max())
    return float(np.trapezoid(w * grid, grid) / np.trapezoid(w, grid))


def quadrature_tweedie_1d(prior: GmmPrior, sched: NoiseSchedule, x_t: float, t: int,
                          n_grid: int = 100_001, tol: float = 1e-6) -> float:
    """Trapezoid estimate of ``E[x0 | x_t]`` for a one-dimensional mixture prior.

    The grid spans eight component standard deviations beyond the extreme
    means. A half-resolution estimate serves as a self-check; disagreement
    above ``tol`` raises :class:`ToleranceError`.
    """
    if prior.d != 1:
        raise DimensionError("quadrature oracle is one-dimensional")
    if n_grid < 101:
        raise ParameterError("grid too small")
    sd = np.sqrt(prior.variances.max())
    lo, hi = prior.means.min() - 8 * sd, prior.means.max() + 8 * sd
    if n_grid % 2 == 0:
        n_grid += 1
    grid = np.linspace(lo, hi, n_grid)
    a, s = float(sched.a[t]), float(sched.s[t])
    logw = _log_post_weights(prior, a, s, float(x_t), grid)
    fine = _trapezoid_mean(grid, logw)
    coarse = _trapezoid_mean(grid[::2], logw[::2])
    if abs(fine - coarse) > tol:
        raise ToleranceError(f"grid too coarse: resolutions differ by {abs(fine - coarse):.3g}")
    return fine


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    se: float
    max_log_weight: float
    n: int

    def __iter__(self):
        return iter((self.estimate, self.se))


def log_mean_exp_jackknife(logw: np.ndarray) -> McEstimate:
    """Log-mean-exp of ``logw`` with a leave-one-out jackknife standard error."""
    logw = np.asarray(logw, dtype=np.float64)
    n = len(logw)
    M = float(np.max(logw))
    if not np.isfinite(M):
        raise NumericError(f"all likelihood weights underflow (max log-weight {M})")
    w = np.exp(logw - M)
    S = w.sum()
    est = M + np.log(S / n)
    with np.errstate(divide="ignore"):
        loo = M + np.log(np.maximum(S - w, 0.0) / (n - 1))
    if not np.all(np.isfinite(loo)):
        return McEstimate(float(est), float("inf"), M, n)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return McEstimate(float(est), float(se), M, n)


def mc_evidence(prior: GmmPrior, task: ForwardTask, y, n_samples: int, seed: int,
                chunk: int = 200_000) -> McEstimate:
    """``log p(y)`` as the log-mean of likelihoods over prior samples."""
    if n_samples < 10_000:
        raise ParameterError("Monte-Carlo evidence needs at least 10^4 samples")
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.float64)
    logw = np.concatenate([
        ad.value(log_likelihood(task, y, prior.sample(min(chunk, n_samples - i), rng)))
        for i in range(0, n_samples, chunk)])
    return log_mean_exp_jackknife(logw)


def mc_chain_evidence(den: Denoiser, sched: NoiseSchedule, task: ForwardTask, y,
                      n_samples: int, seed: int) -> McEstimate:
    """Like :func:`mc_evidence` but with samples from the unguided chain."""
    if n_samples < 10_000:
        raise ParameterError("Monte-Carlo evidence needs at least 10^4 samples")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, task.d))
    x0 = unguided_chain(den, sched, eps, rng.standard_normal((sched.T, n_samples, task.d)))[-1]
    return log_mean_exp_jackknife(ad.value(log_likelihood(task, np.asarray(y), x0)))


class OracleCache:
    """CSV fixture of oracle values keyed by ``(instance digest, seed)``."""

    FIELDS = ("key", "seed", "estimate", "se")

    def __init__(self, path: str):
        self.path = path
        self.rows: dict[tuple[str, int], tuple[float, float]] = {}
        if os.path.exists(path):
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    self.rows[(row["key"], int(row["seed"]))] = (float(row["estimate"]), float(row["se"]))

    def get(self, key: str, seed: int):
        return self.rows.get((key, seed))

    def put(self, key: str, seed: int, estimate: float, se: float) -> None:
        self.rows[(key, seed)] = (float(estimate), float(se))
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for (k, s), (e, sd) in sorted(self.rows.items()):
                w.writerow([k, s, f"{e:.17g}", f"{sd:.17g}"])

    def get_or_compute(self, key: str, seed: int, fn):
        hit = self.get(key, seed)
        if hit is None:
            est = fn()
            self.put(key, seed, est[0], est[1])
            hit = (float(est[0]), float(est[1]))
        return hit
