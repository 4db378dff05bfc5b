"""Builders from an :class:`ExperimentConfig` and the ablation runners."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, LossConfig, PriorConfig, ScheduleConfig, TaskConfig
from .diffusion import (Denoiser, GmmOracleDenoiser, GmmPrior, NoiseSchedule, build_schedule,
                        train_mlp_denoiser)
from .errors import ConfigError
from .objective import LossWeights
from .policies import NoiseStreams, PolicyPair, make_policies
from .tasks import (ForwardTask, ObservationBatch, dense_task, hdr_task, make_dataset,
                    mask_task, pool_task)
from .training import (MetricsRow, TrainConfig, evaluate, rollout_mode, train_stage1,
                       train_stage2)


def build_prior(cfg: PriorConfig) -> GmmPrior:
    rng = np.random.default_rng(cfg.seed)
    means = rng.uniform(-cfg.spread, cfg.spread, (cfg.K, cfg.d))
    return GmmPrior(np.full(cfg.K, 1.0 / cfg.K), means, np.full(cfg.K, cfg.variance))


def build_task(cfg: TaskConfig, d: int) -> ForwardTask:
    if cfg.kind == "pool":
        return pool_task(d, cfg.factor, cfg.sigma_y, cfg.layout)
    if cfg.kind == "mask":
        return mask_task(d, drop_prob=cfg.drop_prob, sigma_y=cfg.sigma_y)
    if cfg.kind == "hdr":
        return hdr_task(d, cfg.alpha, cfg.beta, cfg.sigma_y)
    if cfg.kind == "identity":
        return dense_task(np.eye(d), cfg.sigma_y)
    raise ConfigError(f"unknown task kind {cfg.kind!r}")


def build_sched(cfg: ScheduleConfig) -> NoiseSchedule:
    return build_schedule(cfg.T, cfg.beta_min, cfg.beta_max, cfg.eta, n_base=cfg.n_base,
                          final_std=cfg.final_std)


def build_denoiser(cfg: PriorConfig, prior: GmmPrior, sched: NoiseSchedule) -> Denoiser:
    if cfg.denoiser == "oracle":
        return GmmOracleDenoiser(prior)
    if cfg.denoiser == "mlp":
        return train_mlp_denoiser(prior, sched, steps=cfg.denoiser_steps, seed=cfg.seed)[0]
    raise ConfigError(f"unknown denoiser {cfg.denoiser!r}")


def loss_weights(cfg: LossConfig) -> LossWeights:
    return LossWeights(cfg.w_T, cfg.w_control, cfg.w_score, cfg.lambda2, cfg.lambda3)


def build_policies(cfg: ExperimentConfig, task: ForwardTask, seed: int,
                   stochastic: bool | None = None) -> PolicyPair:
    stoch = cfg.policy.stochastic if stochastic is None else stochastic
    return make_policies(task.d, task.cond_dim, np.random.default_rng(seed),
                         step_hidden=cfg.policy.hidden, noise_hidden=cfg.noise_policy.hidden,
                         kappa=cfg.policy.kappa, stochastic=stoch)


@dataclass(eq=False)
class Setup:
    prior: GmmPrior
    den: Denoiser
    sched: NoiseSchedule
    task: ForwardTask
    train: ObservationBatch
    test: ObservationBatch


def make_setup(cfg: ExperimentConfig, seed: int | None = None) -> Setup:
    """Prior, denoiser, task and disjoint train/test observation sets for one seed."""
    seed = cfg.seed if seed is None else seed
    prior = build_prior(cfg.prior)
    sched = build_sched(cfg.schedule)
    den = build_denoiser(cfg.prior, prior, sched)
    task = build_task(cfg.task, cfg.prior.d)
    ss = np.random.SeedSequence([seed, 7]).spawn(4)
    x_train = prior.sample(cfg.train.n_train, np.random.default_rng(ss[0]))
    x_test = prior.sample(cfg.train.n_test, np.random.default_rng(ss[1]))
    train = make_dataset(task, x_train, int(ss[2].generate_state(1)[0]))
    test = make_dataset(task, x_test, int(ss[3].generate_state(1)[0]))
    return Setup(prior, den, sched, task, train, test)


def train_config(cfg: ExperimentConfig, stage: int, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, stage=stage, seed=seed)


def train_both(cfg: ExperimentConfig, st: Setup, seed: int, stochastic: bool | None = None):
    """Stage 1 then stage 2 from fresh zero-output policies; returns both policy sets."""
    w = loss_weights(cfg.loss)
    pols = build_policies(cfg, st.task, seed, stochastic)
    gamma = cfg.policy.gamma
    p1 = train_stage1(train_config(cfg, 1, seed), st.train, st.den, st.sched, pols, w, gamma).pols
    p2 = train_stage2(train_config(cfg, 2, seed), st.train, st.den, st.sched, p1, w, gamma).pols
    return p1, p2


def eval_modes(cfg: ExperimentConfig, st: Setup, pols: dict[str, PolicyPair | None],
               seed: int) -> list[MetricsRow]:
    """``pols`` maps a mode name to the policies it should use."""
    rows = []
    for mode, p in pols.items():
        rows += evaluate(p, st.den, st.sched, st.test, mode, n_samples=cfg.eval.n_samples,
                         seed=seed, gamma=cfg.policy.gamma, rcfg=cfg.refine,
                         weights=loss_weights(cfg.loss), with_elbo=cfg.eval.with_elbo,
                         peak=cfg.eval.peak)
    return rows


ABLATION_HEADER = ("seed", *MetricsRow.FIELDS)


def two_stage_ablation(cfg: ExperimentConfig, seeds) -> list[tuple]:
    """Stage-1-only versus Stage-1+2 on held-out observations."""
    out = []
    for seed in seeds:
        st = make_setup(cfg, seed)
        p1, p2 = train_both(cfg, st, seed)
        rows = eval_modes(cfg, st, {"stage1_only": p1, "ahvp": p2}, seed + 1000)
        out += [(seed, *r.as_tuple()) for r in rows]
    return out


def shvp_ablation(cfg: ExperimentConfig, seeds) -> list[tuple]:
    """Amortized versus semi-amortized sampling with the same trained policies."""
    out = []
    for seed in seeds:
        st = make_setup(cfg, seed)
        _, p2 = train_both(cfg, st, seed)
        rows = eval_modes(cfg, st, {"ahvp": p2, "shvp": p2}, seed + 1000)
        out += [(seed, *r.as_tuple()) for r in rows]
    return out


def policy_ablation(cfg: ExperimentConfig, seeds, n_rollouts: int = 100,
                    coord: int = 0) -> list[tuple]:
    """Per-observation spread of one coordinate under stochastic and deterministic controllers.

    Each controller is trained from scratch with the matching
    parameterization. Rows: ``(seed, policy, obs_id, std, frac_above, frac_below)``
    where the fractions count samples beyond the midpoint of the two
    extreme prior means along ``coord``.
    """
    out = []
    for seed in seeds:
        st = make_setup(cfg, seed)
        mid = 0.5 * (st.prior.means[:, coord].min() + st.prior.means[:, coord].max())
        for stoch in (True, False):
            _, p2 = train_both(cfg, st, seed, stochastic=stoch)
            rep = st.test.repeat(n_rollouts)
            streams = NoiseStreams.from_seed(seed + 2000, len(rep), st.task.d, st.sched.T)
            tr = rollout_mode("ahvp", p2, st.den, st.sched, rep.task, rep.y, rep.cond, streams,
                              gamma=cfg.policy.gamma)
            x = tr.x0[:, coord].reshape(len(st.test), n_rollouts)
            for i, row in enumerate(x):
                out.append((seed, "stochastic" if stoch else "deterministic", i,
                            float(row.std()), float(np.mean(row > mid)), float(np.mean(row < mid))))
    return out
