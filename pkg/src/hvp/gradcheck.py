"""Finite-difference checks for every differentiable loss in the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .diffusion import GmmOracleDenoiser, GmmPrior, MlpDenoiser, build_schedule, denoiser_mean
from .nn import init_mlp
from .objective import LossWeights, kl_gaussian, shvp_step_objective, stage1_loss, stage2_loss
from .policies import GuidanceConfig, NoiseStreams, ahvp_rollout, make_policies, replay_controls
from .tasks import dense_task, hdr_task, log_likelihood, make_dataset, mask_task, pool_task

REL_TOL = 1e-4


@dataclass(frozen=True)
class GradCheck:
    name: str
    rel_err: float
    n_points: int

    @property
    def passed(self) -> bool:
        return self.rel_err < REL_TOL


def directional_rel_err(f: Callable[[dict], float], grad: dict, point: dict,
                        rng: np.random.Generator, h: float = 1e-5) -> float:
    """Compare ``<grad, v>`` with a central difference of ``f`` along a random unit ``v``."""
    v = {k: rng.standard_normal(np.shape(p)) for k, p in point.items()}
    nrm = np.sqrt(sum(np.sum(x ** 2) for x in v.values()))
    v = {k: x / nrm for k, x in v.items()}
    plus = f({k: point[k] + h * v[k] for k in point})
    minus = f({k: point[k] - h * v[k] for k in point})
    fd = (plus - minus) / (2 * h)
    an = sum(float(np.sum(grad[k] * v[k])) for k in point)
    return abs(fd - an) / max(abs(fd), abs(an), 1e-8)


def _gmm(d: int, rng) -> GmmPrior:
    return GmmPrior(np.array([0.4, 0.6]), rng.uniform(-1, 1, (2, d)), np.array([0.2, 0.4]))


def check_stage1(seed: int, n_points: int = 5) -> GradCheck:
    rng = np.random.default_rng(seed)
    d, T = 2, 4
    sched = build_schedule(T)
    prior = _gmm(d, rng)
    den = GmmOracleDenoiser(prior)
    task = dense_task(rng.normal(size=(2, d)), 0.5)
    data = make_dataset(task, prior.sample(6, rng), seed)
    worst = 0.0
    for _ in range(n_points):
        pols = make_policies(d, task.cond_dim, rng, zero_last=False, scale=0.5,
                             step_hidden=(8,), noise_hidden=(8,))
        streams = NoiseStreams.from_seed(int(rng.integers(1 << 30)), len(data), d, T)
        cfg = GuidanceConfig(controls_active=False)

        def loss(point, tape=None):
            net = pols.noise.net.with_params(point)
            p = pols.replace(noise=type(pols.noise)(net, d))
            tr = ahvp_rollout(p, den, sched, cfg, data.cond, streams, tape=tape, record_kl=False)
            return stage1_loss(tr, task, data.y, LossWeights(w_T=1.0))

        tape = ad.Tape()
        g = ad.backward(tape, loss(pols.noise.net.qualified(), tape))
        point = pols.noise.net.qualified()
        worst = max(worst, directional_rel_err(lambda p: float(ad.value(loss(p))), g, point, rng))
    return GradCheck("stage1_loss", worst, n_points)


def check_stage2(seed: int, n_points: int = 5) -> GradCheck:
    rng = np.random.default_rng(seed)
    d, T = 2, 4
    sched = build_schedule(T)
    prior = _gmm(d, rng)
    den = GmmOracleDenoiser(prior)
    task = pool_task(d, 2, 0.5)
    data = make_dataset(task, prior.sample(6, rng), seed)
    worst = 0.0
    for _ in range(n_points):
        pols = make_policies(d, task.cond_dim, rng, zero_last=False, scale=0.5,
                             step_hidden=(8,), noise_hidden=(8,))
        streams = NoiseStreams.from_seed(int(rng.integers(1 << 30)), len(data), d, T)
        ref = ahvp_rollout(pols, den, sched, GuidanceConfig(), data.cond, streams)

        def loss(point, tape=None):
            p = pols.replace(step=pols.step.with_net(pols.step.net.with_params(point)))
            tr = replay_controls(p, den, sched, GuidanceConfig(), data.cond, streams, ref, tape=tape)
            return stage2_loss(tr, task, data.y, LossWeights(w_T=1.0), sched)

        # the on-policy detached-state gradient must equal the replayed one
        tape = ad.Tape()
        on_policy = ahvp_rollout(pols, den, sched, GuidanceConfig(), data.cond, streams, tape=tape,
                                 detach_states=True, noise_tape=False)
        g = ad.backward(tape, stage2_loss(on_policy, task, data.y, LossWeights(w_T=1.0), sched))
        point = pols.step.net.qualified()
        worst = max(worst, directional_rel_err(lambda p: float(ad.value(loss(p))), g, point, rng))
    return GradCheck("stage2_loss", worst, n_points)


def check_shvp_objective(seed: int, n_points: int = 5) -> GradCheck:
    rng = np.random.default_rng(seed)
    d, T = 3, 8
    sched = build_schedule(T)
    prior = _gmm(d, rng)
    den = GmmOracleDenoiser(prior)
    task = dense_task(rng.normal(size=(2, d)), 0.3)
    y = rng.normal(size=(4, 2))
    worst = 0.0
    for _ in range(n_points):
        t = int(rng.integers(1, T + 1))
        x_t = rng.normal(size=(4, d))
        u0 = 0.3 * rng.normal(size=(4, d))
        w = LossWeights(lambda2=float(rng.uniform(0, 2)), lambda3=float(rng.uniform(0, 2)))

        def f(p):
            return float(np.sum(shvp_step_objective(x_t, p["u"], t, task, y, den, sched, w,
                                                    with_grad=False)[0]))

        g = shvp_step_objective(x_t, u0, t, task, y, den, sched, w)[1]
        worst = max(worst, directional_rel_err(f, {"u": g}, {"u": u0}, rng))
    return GradCheck("shvp_step_objective", worst, n_points)


def check_log_likelihood(seed: int, n_points: int = 5) -> list[GradCheck]:
    rng = np.random.default_rng(seed)
    d = 4
    tasks = {
        "dense": dense_task(rng.normal(size=(3, d)), 0.2),
        "pool": pool_task(d, 2, 0.2),
        "mask": mask_task(d, mask=np.array([1.0, 0.0, 1.0, 1.0]), sigma_y=0.2),
        "hdr": hdr_task(d, sigma_y=0.2),
    }
    out = []
    for name, task in tasks.items():
        worst = 0.0
        for _ in range(n_points):
            # HDR points sit inside the unclipped band so the check avoids the kinks
            x0 = rng.uniform(0.05, 0.45, (3, d)) if name == "hdr" else rng.normal(size=(3, d))
            y = rng.normal(size=(3, task.m))

            def f(p):
                return float(np.sum(ad.value(log_likelihood(task, y, p["x"]))))

            tape = ad.Tape()
            g = ad.backward(tape, ad.sum(log_likelihood(task, y, tape.watch("x", x0))))
            worst = max(worst, directional_rel_err(f, g, {"x": x0}, rng, h=1e-6))
        out.append(GradCheck(f"log_likelihood[{name}]", worst, n_points))
    return out


def check_kl(seed: int, n_points: int = 5) -> GradCheck:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        pt = {"m1": rng.normal(size=3), "s1": rng.uniform(0.3, 2, 3)}
        m2, s2 = rng.normal(size=3), rng.uniform(0.3, 2, 3)

        def f(p):
            return float(ad.value(kl_gaussian(p["m1"], p["s1"], m2, s2)))

        tape = ad.Tape()
        out = kl_gaussian(tape.watch("m1", pt["m1"]), tape.watch("s1", pt["s1"]), m2, s2)
        g = ad.backward(tape, out)
        worst = max(worst, directional_rel_err(f, g, pt, rng, h=1e-6))
    return GradCheck("kl_gaussian", worst, n_points)


def check_denoiser_mean(seed: int, n_points: int = 5) -> list[GradCheck]:
    """Sum of the reverse-step mean against ``x_t`` for the mixture oracle and an MLP denoiser."""
    rng = np.random.default_rng(seed)
    d = 2
    sched = build_schedule(8)
    dens = {"gmm": GmmOracleDenoiser(_gmm(d, rng)),
            "mlp": MlpDenoiser(init_mlp("denoiser", (d + 2, 8, d), rng, zero_last=False))}
    out = []
    for name, den in dens.items():
        worst = 0.0
        for _ in range(n_points):
            t = int(rng.integers(1, sched.T + 1))
            x = rng.normal(size=(3, d))
            w = rng.normal(size=(3, d))

            def f(p):
                return float(np.sum(w * ad.value(denoiser_mean(den, sched, p["x"], t))))

            tape = ad.Tape()
            g = ad.backward(tape, ad.sum(w * denoiser_mean(den, sched, tape.watch("x", x), t)))
            worst = max(worst, directional_rel_err(f, g, {"x": x}, rng))
        out.append(GradCheck(f"denoiser_mean[{name}]", worst, n_points))
    return out


def run_gradcheck(seed: int = 0, n_points: int = 5) -> list[GradCheck]:
    """All checks; each reports the worst relative error over ``n_points`` random points."""
    return [check_stage1(seed, n_points), check_stage2(seed, n_points),
            check_shvp_objective(seed, n_points), *check_log_likelihood(seed, n_points),
            check_kl(seed, n_points), *check_denoiser_mean(seed, n_points)]
