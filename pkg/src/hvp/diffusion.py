"""Discrete variance-preserving diffusion with a Gaussian-mixture data prior.

Index convention: ``sched.a[t]`` and ``sched.s[t]`` for ``t = 0..T`` give the
forward marginal ``x_t = a_t x_0 + s_t eps``; ``sched.rsigma[t - 1]`` is the
standard deviation of the reverse step ``p(x_{t-1} | x_t)``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, ParameterError, ScheduleError
from .nn import AdamState, Mlp, adam_step, init_mlp, mlp_forward


@dataclass
class CallCounter:
    """Per-sampler evaluation counts (per trajectory: a batched call counts once)."""

    denoiser: int = 0
    step_policy: int = 0
    noise_policy: int = 0
    inner_iterations: int = 0

    @property
    def policy_total(self) -> int:
        return self.step_policy + self.noise_policy


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    a: np.ndarray
    s: np.ndarray
    rsigma: np.ndarray
    eta: float
    beta_min: float = 1e-4
    beta_max: float = 0.02
    n_base: int = 1000
    final_std: float = 0.01

    @property
    def T(self) -> int:
        return len(self.a) - 1

    def policy_std(self, t: int, kappa: float) -> float:
        """Per-step control std ``kappa * s_t``; strictly decreasing as ``t`` falls."""
        return kappa * float(self.s[t])

    def det_coef(self, t: int) -> float:
        """Weight on the predicted noise direction in the reverse mean for step ``t``."""
        return float(np.sqrt(max(self.s[t - 1] ** 2 - self.rsigma[t - 1] ** 2, 0.0)))


def build_schedule(T: int = 8, beta_min: float = 1e-4, beta_max: float = 0.02,
                   eta: float = 0.5, *, n_base: int = 1000,
                   final_std: float = 0.01) -> NoiseSchedule:
    """Linear-beta VP schedule on ``n_base`` fine steps, subsampled to ``T`` steps.

    Reverse-step stds follow the DDIM interpolation scaled by ``eta``. That
    rule gives zero noise on the last step (``s_0 = 0``), which would make
    every transition KL infinite for a nonzero final control, so the last
    step uses ``min(final_std, rsigma for step 2)`` instead.
    """
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError("need 0 < beta_min <= beta_max < 1")
    if T < 1 or T > n_base:
        raise ParameterError("need 1 <= T <= n_base")
    if not (0.0 <= eta <= 1.0):
        raise ParameterError("eta must lie in [0, 1]")
    if final_std < 0.0:
        raise ParameterError("final_std must be nonnegative")
    betas = np.linspace(beta_min, beta_max, n_base)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    idx = np.round(np.linspace(0, n_base, T + 1)).astype(int)
    a = np.sqrt(alpha_bar[idx])
    a[0] = 1.0
    s = np.sqrt(1.0 - alpha_bar[idx])
    s[0] = 0.0
    rsigma = np.zeros(T)
    for t in range(2, T + 1):
        ratio = (a[t] ** 2 * s[t - 1] ** 2) / (a[t - 1] ** 2 * s[t] ** 2)
        rsigma[t - 1] = eta * s[t - 1] * np.sqrt(max(1.0 - ratio, 0.0))
    rsigma[0] = min(final_std, rsigma[1]) if T >= 2 else final_std
    sched = NoiseSchedule(a, s, rsigma, float(eta), float(beta_min), float(beta_max),
                          int(n_base), float(final_std))
    check_schedule(sched)
    return sched


def check_schedule(sched: NoiseSchedule) -> None:
    a, s, r = sched.a, sched.s, sched.rsigma
    if a[0] != 1.0 or s[0] != 0.0:
        raise ScheduleError("boundary condition a_0 = 1, s_0 = 0 violated")
    if np.any(np.diff(a) >= 0) or np.any(np.diff(s) <= 0):
        raise ScheduleError("a must strictly decrease and s strictly increase in t")
    if np.max(np.abs(a ** 2 + s ** 2 - 1.0)) > 1e-12:
        raise ScheduleError("schedule is not variance preserving")
    if np.any(r[1:] > s[1:-1] + 1e-15):
        raise ScheduleError("reverse std exceeds the marginal noise level")
    if np.any(np.diff(r) < -1e-15):
        raise ScheduleError("reverse stds must be nonincreasing along the rollout")


# -- data prior ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if w.ndim != 1 or len(w) != len(m) or len(v) != len(w):
            raise DimensionError("weights, means and variances disagree on K")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("mixture weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ParameterError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.K, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.d))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.means[None]
        lp = (np.log(self.weights) - 0.5 * np.sum(diff ** 2, -1) / self.variances
              - 0.5 * self.d * np.log(2 * np.pi * self.variances))
        m = lp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True)))[:, 0]


def standard_prior(d: int) -> GmmPrior:
    return GmmPrior(np.ones(1), np.zeros((1, d)), np.ones(1))


def gmm_posterior_mean(prior: GmmPrior, x_t, a_t: float, s_t: float):
    """``E[x_0 | x_t]`` under the mixture prior; tape-differentiable in ``x_t``."""
    v = prior.variances
    tot = a_t ** 2 * v + s_t ** 2
    if np.any(tot <= 0):
        raise NumericError("degenerate noised component variance a_t^2 v_k + s_t^2 <= 0")
    xv = ad.value(x_t)
    single = xv.ndim == 1
    if single:
        x_t = ad.reshape(x_t, (1, -1))
        xv = xv[None]
    B, d = xv.shape
    if d != prior.d:
        raise DimensionError(f"state dim {d} != prior dim {prior.d}")
    x3 = ad.reshape(x_t, (B, 1, d))
    diff = x3 - a_t * prior.means[None]
    logits = (np.log(prior.weights) - 0.5 * d * np.log(2 * np.pi * tot)
              - 0.5 * ad.sum(ad.square(diff), axis=-1) / tot)
    resp = ad.softmax(logits, axis=1)
    comp = (x3 * (a_t * v / tot)[None, :, None]
            + (s_t ** 2 / tot)[:, None] * prior.means)
    out = ad.sum(ad.reshape(resp, (B, prior.K, 1)) * comp, axis=1)
    return ad.reshape(out, (d,)) if single else out


# -- denoisers -------------------------------------------------------------

class Denoiser(ABC):
    """Pretrained-model stand-in: predicts the clean signal from ``(x_t, t)``."""

    d: int

    @abstractmethod
    def tweedie(self, x_t, sched: NoiseSchedule, t: int):
        """Posterior-mean estimate of ``x_0``."""


@dataclass(eq=False)
class GmmOracleDenoiser(Denoiser):
    prior: GmmPrior

    @property
    def d(self) -> int:
        return self.prior.d

    def tweedie(self, x_t, sched, t):
        return gmm_posterior_mean(self.prior, x_t, float(sched.a[t]), float(sched.s[t]))


@dataclass(eq=False)
class MlpDenoiser(Denoiser):
    """Learned ``x_0`` predictor on ``concat(x_t, a_t, s_t)``."""

    net: Mlp

    @property
    def d(self) -> int:
        return self.net.widths[-1]

    def tweedie(self, x_t, sched, t):
        xv = ad.value(x_t)
        single = xv.ndim == 1
        x2 = ad.reshape(x_t, (1, -1)) if single else x_t
        n = ad.value(x2).shape[0]
        emb = np.tile([sched.a[t], sched.s[t]], (n, 1))
        out = mlp_forward(self.net, ad.concat([x2, emb], axis=1))
        return ad.reshape(out, (self.d,)) if single else out


def train_mlp_denoiser(prior: GmmPrior, sched: NoiseSchedule, *, hidden=(64, 64),
                       steps: int = 2000, batch: int = 256, lr: float = 3e-3,
                       seed: int = 0) -> tuple[MlpDenoiser, list[float]]:
    """Denoising regression on prior samples at the schedule's own time points."""
    rng = np.random.default_rng(seed)
    net = init_mlp("denoiser", (prior.d + 2, *hidden, prior.d), rng, zero_last=False)
    opt = AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        x0 = prior.sample(batch, rng)
        t = rng.integers(1, sched.T + 1, size=batch)
        eps = rng.standard_normal(x0.shape)
        xt = sched.a[t][:, None] * x0 + sched.s[t][:, None] * eps
        inp = np.concatenate([xt, sched.a[t][:, None], sched.s[t][:, None]], axis=1)
        tape = ad.Tape()
        pred = mlp_forward(net, inp, tape)
        loss = ad.mean(ad.square(pred - x0))
        grads = ad.backward(tape, loss)
        net = net.with_params(adam_step(opt, net.qualified(), grads))
        losses.append(float(ad.value(loss)))
    return MlpDenoiser(net), losses


def gmm_tweedie(prior: GmmPrior, sched: NoiseSchedule, x_t, t: int):
    if not 0 <= t <= sched.T:
        raise ParameterError(f"t={t} outside [0, {sched.T}]")
    return gmm_posterior_mean(prior, x_t, float(sched.a[t]), float(sched.s[t]))


def mean_from_tweedie(sched: NoiseSchedule, x_t, x0_hat, t: int):
    """Reverse-step mean ``a_{t-1} x0 + c_t (x_t - a_t x0) / s_t``."""
    if sched.s[t] <= 0:
        raise ScheduleError(f"s_t = 0 at t={t}")
    c = sched.det_coef(t)
    return sched.a[t - 1] * x0_hat + (c / sched.s[t]) * (x_t - sched.a[t] * x0_hat)


def denoise(den: Denoiser, sched: NoiseSchedule, x_t, t: int,
            counter: CallCounter | None = None):
    """One denoiser evaluation returning ``(x0_hat, mean)``."""
    if not 1 <= t <= sched.T:
        raise ParameterError(f"t={t} outside [1, {sched.T}]")
    x0_hat = den.tweedie(x_t, sched, t)
    if counter is not None:
        counter.denoiser += 1
    return x0_hat, mean_from_tweedie(sched, x_t, x0_hat, t)


def denoiser_mean(den: Denoiser, sched: NoiseSchedule, x_t, t: int,
                  counter: CallCounter | None = None):
    return denoise(den, sched, x_t, t, counter)[1]


def reverse_sample(den: Denoiser, sched: NoiseSchedule, x_t, t: int, noise,
                   counter: CallCounter | None = None):
    """``x_{t-1} = mean(x_t, t) + rsigma_{t-1} * noise``."""
    mu = denoiser_mean(den, sched, x_t, t, counter)
    return mu + float(sched.rsigma[t - 1]) * noise


def unguided_chain(den: Denoiser, sched: NoiseSchedule, x_T: np.ndarray,
                   step_noise: np.ndarray, counter: CallCounter | None = None) -> list[np.ndarray]:
    """States ``[x_T, ..., x_0]``; ``step_noise[k]`` drives step ``t = T - k``."""
    xs = [x_T]
    x = x_T
    for k, t in enumerate(range(sched.T, 0, -1)):
        x = reverse_sample(den, sched, x, t, step_noise[k], counter)
        xs.append(x)
    return xs
