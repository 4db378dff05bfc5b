"""Initial-noise policy, per-step Gaussian controller and the guided rollout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .diffusion import CallCounter, Denoiser, NoiseSchedule, denoise
from .errors import DimensionError, ParameterError
from .nn import Mlp, init_mlp, mlp_forward

EMA_DECAY = 0.9


@dataclass(frozen=True, eq=False)
class NoisePolicy:
    """``x_T = eps + E(cond, eps)`` with ``E`` an MLP on ``concat(cond, eps)``."""

    net: Mlp
    d: int

    @property
    def cond_dim(self) -> int:
        return self.net.widths[0] - self.d


@dataclass(frozen=True, eq=False)
class StepPolicy:
    """Gaussian controller ``N(pi(x_t, u_prev, u_ema, cond, a_t, s_t), (kappa s_t)^2 I)``."""

    net: Mlp
    d: int
    kappa: float = 0.05
    stochastic: bool = True

    def __post_init__(self):
        if self.kappa <= 0:
            raise ParameterError("kappa must be positive")

    @property
    def cond_dim(self) -> int:
        return self.net.widths[0] - 3 * self.d - 2

    def with_net(self, net: Mlp) -> "StepPolicy":
        return StepPolicy(net, self.d, self.kappa, self.stochastic)


@dataclass(frozen=True, eq=False)
class PolicyPair:
    noise: NoisePolicy
    step: StepPolicy

    @property
    def d(self) -> int:
        return self.noise.d

    def networks(self) -> list[Mlp]:
        return [self.noise.net, self.step.net]

    def replace(self, noise: NoisePolicy | None = None, step: StepPolicy | None = None) -> "PolicyPair":
        return PolicyPair(noise or self.noise, step or self.step)

    def deterministic(self) -> "PolicyPair":
        s = self.step
        return PolicyPair(self.noise, StepPolicy(s.net, s.d, s.kappa, False))


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 1.0
    noise_active: bool = True
    controls_active: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError("gamma must be nonnegative")


def make_policies(d: int, cond_dim: int, rng: np.random.Generator, *,
                  step_hidden=(64, 64), noise_hidden=(64, 64), kappa: float = 0.05,
                  stochastic: bool = True, zero_last: bool = True, scale: float = 1.0) -> PolicyPair:
    """Fresh policies; with ``zero_last`` both start as exact no-ops."""
    noise = init_mlp("noise", (cond_dim + d, *noise_hidden, d), rng,
                     zero_last=zero_last, scale=scale)
    step = init_mlp("step", (3 * d + cond_dim + 2, *step_hidden, d), rng,
                    zero_last=zero_last, scale=scale)
    return PolicyPair(NoisePolicy(noise, d), StepPolicy(step, d, kappa, stochastic))


@dataclass(frozen=True, eq=False)
class NoiseStreams:
    """Pre-drawn standard normals per role; index ``k = T - t`` for per-step arrays."""

    eps: np.ndarray
    control: np.ndarray
    step: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, batch: int, d: int, T: int) -> "NoiseStreams":
        gens = [np.random.Generator(np.random.Philox(s))
                for s in np.random.SeedSequence(seed).spawn(3)]
        return cls(gens[0].standard_normal((batch, d)),
                   gens[1].standard_normal((T, batch, d)),
                   gens[2].standard_normal((T, batch, d)))

    @property
    def batch(self) -> int:
        return self.eps.shape[0]


def sample_initial_noise(pol: NoisePolicy, cond, eps, tape: ad.Tape | None = None,
                         counter: CallCounter | None = None):
    """Return ``(x_T, E(cond, eps))``."""
    if np.shape(eps)[-1] != pol.d:
        raise DimensionError(f"noise dim {np.shape(eps)[-1]} != policy dim {pol.d}")
    offset = mlp_forward(pol.net, ad.concat([cond, eps], axis=-1), tape)
    if counter is not None:
        counter.noise_policy += 1
    return eps + offset, offset


def step_features(x_t, u_prev, u_ema, cond, sched: NoiseSchedule, t: int):
    n = np.shape(ad.value(x_t))[0]
    emb = np.tile([sched.a[t], sched.s[t]], (n, 1))
    return ad.concat([x_t, u_prev, u_ema, cond, emb], axis=-1)


def sample_control(pol: StepPolicy, x_t, u_prev, u_ema, cond, t: int, sched: NoiseSchedule,
                   noise, tape: ad.Tape | None = None, counter: CallCounter | None = None):
    """Return ``(u_t, mean, std)``; deterministic policies return ``u_t = mean, std = 0``."""
    if np.shape(ad.value(x_t))[-1] != pol.d:
        raise DimensionError("state dim does not match the step policy")
    mean = mlp_forward(pol.net, step_features(x_t, u_prev, u_ema, cond, sched, t), tape)
    if counter is not None:
        counter.step_policy += 1
    if not pol.stochastic:
        return mean, mean, 0.0
    std = sched.policy_std(t, pol.kappa)
    return mean + std * noise, mean, std


class StepResult(NamedTuple):
    x_prev: object
    mu_ctrl: object
    mu_free: object
    x0_hat: object


def guided_step(den: Denoiser, sched: NoiseSchedule, gamma: float, x_t, u_t, t: int, noise,
                record_kl: bool = True, counter: CallCounter | None = None) -> StepResult:
    """Controlled reverse step ``N(mean(x_t + gamma u_t, t), rsigma_{t-1}^2 I)``.

    ``x0_hat`` is the denoiser's clean-signal estimate at the controlled input.
    The uncontrolled mean costs a second denoiser evaluation and is only
    computed when ``record_kl`` is set.
    """
    x0_hat, mu_ctrl = denoise(den, sched, x_t + gamma * u_t, t, counter)
    mu_free = None
    if record_kl:
        mu_free = denoise(den, sched, x_t, t, counter)[1]
    x_prev = mu_ctrl + float(sched.rsigma[t - 1]) * noise
    return StepResult(x_prev, mu_ctrl, mu_free, x0_hat)


@dataclass(eq=False)
class GuidedTrajectory:
    """One batched rollout. Per-step lists run from ``t = T`` down to ``t = 1``."""

    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    policy_means: list = field(default_factory=list)
    policy_stds: list[float] = field(default_factory=list)
    mu_ctrl: list = field(default_factory=list)
    mu_free: list = field(default_factory=list)
    x0_hat: list = field(default_factory=list)
    eps: np.ndarray | None = None
    noise_offset: object = None
    cond: np.ndarray | None = None
    controls_active: bool = True
    stochastic: bool = True
    gamma: float = 1.0
    counter: CallCounter = field(default_factory=CallCounter)
    elbo: object = None

    @property
    def T(self) -> int:
        return len(self.states) - 1

    @property
    def x0(self) -> np.ndarray:
        return ad.value(self.states[-1])

    @property
    def sigma_bar(self) -> np.ndarray:
        return np.array(self.policy_stds)


def ahvp_rollout(pols: PolicyPair, den: Denoiser, sched: NoiseSchedule, cfg: GuidanceConfig,
                 cond: np.ndarray, streams: NoiseStreams | int, *, tape: ad.Tape | None = None,
                 record_kl: bool = True, detach_states: bool = False,
                 noise_tape: bool = True, counter: CallCounter | None = None,
                 refine=None) -> GuidedTrajectory:
    """Single pass through the guided process for a batch of conditions.

    ``detach_states`` cuts gradients between time steps (each step's policy
    sees a constant state and control history). ``noise_tape=False`` keeps
    the initial-noise policy off the tape. ``refine`` is an optional hook
    ``refine(t, x_t, u_t) -> (u_t, x0_hat, mu_ctrl, mu_free)`` that replaces
    the guided step's denoiser evaluations (used by the semi-amortized sampler).
    """
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    B, d = cond.shape[0], pols.d
    if isinstance(streams, (int, np.integer)):
        streams = NoiseStreams.from_seed(int(streams), B, d, sched.T)
    if streams.batch != B:
        raise DimensionError("noise streams and conditions disagree on batch size")
    counter = counter if counter is not None else CallCounter()
    traj = GuidedTrajectory(cond=cond, eps=streams.eps, controls_active=cfg.controls_active,
                            stochastic=pols.step.stochastic, gamma=cfg.gamma, counter=counter)

    if cfg.noise_active:
        x, offset = sample_initial_noise(pols.noise, cond, streams.eps,
                                         tape if noise_tape else None, counter)
    else:
        x, offset = streams.eps.copy(), np.zeros_like(streams.eps)
    traj.noise_offset = offset
    traj.states.append(x)

    u_prev = np.zeros((B, d))
    u_ema = np.zeros((B, d))
    for k, t in enumerate(range(sched.T, 0, -1)):
        x_in = ad.value(x) if detach_states else x
        if cfg.controls_active:
            u, mean, std = sample_control(pols.step, x_in, u_prev, u_ema, cond, t, sched,
                                          streams.control[k], tape, counter)
        else:
            u, mean, std = np.zeros((B, d)), np.zeros((B, d)), 0.0
        if cfg.controls_active and refine is not None:
            u, x0_hat, mu_ctrl, mu_free = refine(t, ad.value(x_in), ad.value(u))
            step = StepResult(mu_ctrl + float(sched.rsigma[t - 1]) * streams.step[k],
                              mu_ctrl, mu_free, x0_hat)
        elif cfg.controls_active:
            step = guided_step(den, sched, cfg.gamma, x_in, u, t, streams.step[k],
                               record_kl, counter)
        else:
            x0_hat, mu = denoise(den, sched, x_in, t, counter)
            step = StepResult(mu + float(sched.rsigma[t - 1]) * streams.step[k], mu, mu, x0_hat)
        traj.controls.append(u)
        traj.policy_means.append(mean)
        traj.policy_stds.append(float(std))
        traj.mu_ctrl.append(step.mu_ctrl)
        traj.mu_free.append(step.mu_free)
        traj.x0_hat.append(step.x0_hat)
        x = step.x_prev
        traj.states.append(x)
        if cfg.controls_active:
            uv = ad.value(u) if detach_states else u
            u_ema = EMA_DECAY * u_ema + (1.0 - EMA_DECAY) * uv
            u_prev = uv
    return traj


def replay_controls(pols: PolicyPair, den: Denoiser, sched: NoiseSchedule, cfg: GuidanceConfig,
                    cond: np.ndarray, streams: NoiseStreams, ref: GuidedTrajectory, *,
                    tape: ad.Tape | None = None) -> GuidedTrajectory:
    """Re-evaluate the controller at the states and control history of ``ref``.

    The result is the per-step (stop-gradient) objective as an ordinary
    function of the step-policy parameters, with states held fixed.
    """
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    traj = GuidedTrajectory(cond=cond, eps=ref.eps, controls_active=True,
                            stochastic=pols.step.stochastic, gamma=cfg.gamma)
    traj.noise_offset = ad.value(ref.noise_offset)
    traj.states = [ad.value(x) for x in ref.states]
    B, d = cond.shape[0], pols.d
    u_prev, u_ema = np.zeros((B, d)), np.zeros((B, d))
    for k, t in enumerate(range(sched.T, 0, -1)):
        x_t = traj.states[k]
        u, mean, std = sample_control(pols.step, x_t, u_prev, u_ema, cond, t, sched,
                                      streams.control[k], tape)
        step = guided_step(den, sched, cfg.gamma, x_t, u, t, streams.step[k])
        traj.controls.append(u)
        traj.policy_means.append(mean)
        traj.policy_stds.append(float(std))
        traj.mu_ctrl.append(step.mu_ctrl)
        traj.mu_free.append(step.mu_free)
        traj.x0_hat.append(step.x0_hat)
        uv = ad.value(ref.controls[k])
        u_ema = EMA_DECAY * u_ema + (1.0 - EMA_DECAY) * uv
        u_prev = uv
    return traj


def unguided_rollout(den: Denoiser, sched: NoiseSchedule, d: int, batch: int,
                     streams: NoiseStreams | int, record_kl: bool = False) -> GuidedTrajectory:
    """The pretrained chain from ``x_T = eps``: no policy evaluations at all."""
    dummy = make_policies(d, 0, np.random.default_rng(0), step_hidden=(1,), noise_hidden=(1,))
    cfg = GuidanceConfig(noise_active=False, controls_active=False)
    return ahvp_rollout(dummy, den, sched, cfg, np.zeros((batch, 0)), streams, record_kl=record_kl)
