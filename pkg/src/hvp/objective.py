"""Hierarchical ELBO terms, training surrogates and the per-step refinement objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import CallCounter, Denoiser, NoiseSchedule, denoise
from .errors import ContractError, ParameterError
from .nn import input_jacobian, mlp_forward
from .policies import GuidedTrajectory, PolicyPair
from .tasks import ForwardTask, log_likelihood

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class LossWeights:
    """Loss weights. ``None`` entries resolve to stage-specific defaults.

    ``w_control`` defaults to 1.0 for the noise-policy penalty and to 0.5 for
    the per-step control penalty; ``w_score`` defaults to ``1 / (2 rsigma_{t-1}^2)``
    per step. With these, the per-step surrogates match the exact Gaussian KLs
    up to additive constants. The refinement weights ``lambda2`` and ``lambda3``
    default to the training weights divided by ``w_T``, so the refinement
    objective is the per-step training loss rescaled to unit reward weight.
    """

    w_T: float = 50.0
    w_control: float | None = None
    w_score: float | None = None
    lambda2: float | None = None
    lambda3: float | None = None

    def __post_init__(self):
        for k in ("w_T", "w_control", "w_score", "lambda2", "lambda3"):
            v = getattr(self, k)
            if v is not None and v < 0:
                raise ParameterError(f"loss weight {k} must be nonnegative")

    def noise_penalty(self) -> float:
        return 1.0 if self.w_control is None else self.w_control

    def control_penalty(self) -> float:
        return 0.5 if self.w_control is None else self.w_control

    def score_weight(self, sched: NoiseSchedule, t: int) -> float:
        if self.w_score is not None:
            return self.w_score
        return 1.0 / (2.0 * float(sched.rsigma[t - 1]) ** 2)

    def refine_lambda2(self, sched: NoiseSchedule, t: int) -> float:
        if self.lambda2 is not None:
            return self.lambda2
        return self.score_weight(sched, t) / self.w_T

    def refine_lambda3(self) -> float:
        if self.lambda3 is not None:
            return self.lambda3
        return self.control_penalty() / self.w_T


def kl_gaussian(m1, s1, m2, s2):
    """``KL(N(m1, s1^2 I) || N(m2, s2^2 I))`` summed over the last axis."""
    s1v, s2v = ad.value(s1), ad.value(s2)
    if np.any(s1v <= 0) or np.any(s2v <= 0):
        raise ParameterError("standard deviations must be positive")
    d = np.shape(ad.value(m1))[-1] if np.ndim(ad.value(m1)) else 1
    s1b = s1 * np.ones(d) if np.ndim(s1v) == 0 else s1
    s2b = s2 * np.ones(d) if np.ndim(s2v) == 0 else s2
    per = (ad.log(s2b / s1b) + (ad.square(s1b) + ad.square(m1 - m2)) / (2.0 * ad.square(s2b)) - 0.5)
    return ad.sum(per, axis=-1)


@dataclass(frozen=True)
class ElboTerms:
    """Per-trajectory terms (arrays of shape ``(B,)``)."""

    reward: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    exact: bool

    @property
    def elbo(self) -> np.ndarray:
        return self.reward - self.l1 - self.l2 - self.l3

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k))) for k in ("reward", "l1", "l2", "l3", "elbo")}


def _log_std_normal(x: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(x ** 2, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI


def noise_kl_estimate(pols: PolicyPair, cond: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Single-sample estimate of ``KL(q(x_T | y) || N(0, I))`` by change of variables.

    Valid when ``eps -> eps + E(cond, eps)`` is a bijection, which holds for
    instance whenever the noise network is a contraction in ``eps``.
    """
    net = pols.noise.net
    inp = np.concatenate([cond, eps], axis=-1)
    J = input_jacobian(net, inp, slice(pols.noise.cond_dim, None))
    _, logdet = np.linalg.slogdet(np.eye(pols.d)[None] + J)
    x_T = eps + mlp_forward(net, inp)
    return _log_std_normal(eps) - logdet - _log_std_normal(x_T)


def elbo_terms(traj: GuidedTrajectory, task: ForwardTask, y, sched: NoiseSchedule,
               pols: PolicyPair, exact: bool = True, noise_active: bool = True) -> ElboTerms:
    """Single-trajectory estimates of the reward and the three regularizers.

    Exact mode uses Gaussian KLs; a deterministic controller has no latent
    controls, so its control KL is identically zero. Surrogate mode uses
    the squared-norm training penalties.
    """
    if traj.controls_active and any(m is None for m in traj.mu_free):
        raise ContractError("trajectory was rolled out without recording uncontrolled means")
    x0 = traj.x0
    reward = np.asarray(ad.value(log_likelihood(task, y, x0)))
    B = x0.shape[0]
    offset = ad.value(traj.noise_offset)
    if not noise_active or not np.any(offset):
        l1 = np.zeros(B)
    elif exact:
        l1 = noise_kl_estimate(pols, traj.cond, traj.eps)
    else:
        l1 = np.sum(offset ** 2, axis=-1)
    l2 = np.zeros(B)
    l3 = np.zeros(B)
    if traj.controls_active:
        for k, t in enumerate(range(traj.T, 0, -1)):
            diff = ad.value(traj.mu_ctrl[k]) - ad.value(traj.mu_free[k])
            sq = np.sum(diff ** 2, axis=-1)
            u = ad.value(traj.controls[k])
            if exact:
                rs = float(sched.rsigma[t - 1])
                with np.errstate(divide="ignore", invalid="ignore"):
                    l2 = l2 + np.where(sq == 0, 0.0, sq / (2 * rs ** 2))
                if traj.stochastic:
                    mean = ad.value(traj.policy_means[k])
                    l3 = l3 + kl_gaussian(mean, traj.policy_stds[k], 0.0 * mean, 1.0)
            else:
                l2 = l2 + sq
                l3 = l3 + np.sum(u ** 2, axis=-1)
    terms = ElboTerms(reward, l1, l2, l3, exact)
    traj.elbo = terms
    return terms


def stage1_loss(traj: GuidedTrajectory, task: ForwardTask, y, weights: LossWeights):
    """``-w_T mean log p(y | x_0) + w_control mean ||E(y, eps)||^2`` on the rollout's tape."""
    ll = log_likelihood(task, y, traj.states[-1])
    pen = ad.sum(ad.square(traj.noise_offset), axis=-1)
    return -weights.w_T * ad.mean(ll) + weights.noise_penalty() * ad.mean(pen)


def stage2_loss(traj: GuidedTrajectory, task: ForwardTask, y, weights: LossWeights,
                sched: NoiseSchedule):
    """Per-step Tweedie surrogate summed over steps, averaged over the batch.

    The trajectory must come from a rollout with ``detach_states=True`` so
    gradients reach the controller only through each step's own control.
    """
    if any(m is None for m in traj.mu_free):
        raise ContractError("stage-2 loss needs uncontrolled means (record_kl=True)")
    total = 0.0
    for k, t in enumerate(range(traj.T, 0, -1)):
        ll = log_likelihood(task, y, traj.x0_hat[k])
        score = ad.sum(ad.square(traj.mu_ctrl[k] - ad.value(traj.mu_free[k])), axis=-1)
        ctrl = ad.sum(ad.square(traj.controls[k]), axis=-1)
        step = (-weights.w_T * ll + weights.score_weight(sched, t) * score
                + weights.control_penalty() * ctrl)
        total = total + ad.mean(step)
    return total


def shvp_step_objective(x_t: np.ndarray, u_t: np.ndarray, t: int, task: ForwardTask, y,
                        den: Denoiser, sched: NoiseSchedule, weights: LossWeights,
                        gamma: float = 1.0, mu_free: np.ndarray | None = None,
                        counter: CallCounter | None = None, with_grad: bool = True):
    """Per-row ``log p(y | x0_hat) - lambda2 ||dmu||^2 - lambda3 ||u||^2`` and its ``u``-gradient.

    Returns ``(value, grad, x0_hat, mu_ctrl)``; ``grad`` is ``None`` when
    ``with_grad`` is False. A value-and-gradient evaluation is charged as
    two denoiser evaluations (forward and vector-Jacobian product).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if mu_free is None:
        mu_free = ad.value(denoise(den, sched, x_t, t, counter)[1])
    tape = ad.Tape() if with_grad else None
    u = tape.watch("u", u_t) if with_grad else np.asarray(u_t, dtype=np.float64)
    x0_hat, mu_ctrl = denoise(den, sched, x_t + gamma * u, t)
    per_row = (log_likelihood(task, y, x0_hat)
               - weights.refine_lambda2(sched, t) * ad.sum(ad.square(mu_ctrl - mu_free), axis=-1)
               - weights.refine_lambda3() * ad.sum(ad.square(u), axis=-1))
    grad = None
    if with_grad:
        grad = ad.backward(tape, ad.sum(per_row))["u"]
    if counter is not None:
        counter.denoiser += 2 if with_grad else 1
    return ad.value(per_row), grad, ad.value(x0_hat), ad.value(mu_ctrl)
