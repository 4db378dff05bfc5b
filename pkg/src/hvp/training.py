"""Two-stage policy training, semi-amortized refinement and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import CallCounter, Denoiser, NoiseSchedule, denoise
from .errors import NumericError, ParameterError
from .nn import AdamState, Mlp, adam_step
from .objective import LossWeights, elbo_terms, shvp_step_objective, stage1_loss, stage2_loss
from .policies import (GuidanceConfig, GuidedTrajectory, NoiseStreams, PolicyPair,
                       ahvp_rollout, unguided_rollout)
from .tasks import ForwardTask, ObservationBatch, apply, log_likelihood

MODES = ("unguided", "stage1_only", "ahvp", "ahvp_det", "shvp")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    n_train: int = 512
    n_test: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ParameterError("stage must be 1 or 2")
        if self.epochs < 0 or self.batch_size < 1 or self.n_train < 1 or self.n_test < 0:
            raise ParameterError("epochs, batch size and dataset sizes must be positive")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")


@dataclass(frozen=True)
class RefineConfig:
    """Inner loop of the semi-amortized sampler.

    ``step_rule="normalized"`` moves each row a distance ``lr`` along its
    gradient direction; ``"plain"`` takes ``lr * grad``. With backtracking a
    candidate that lowers the objective is rejected and that row's step
    length halves. ``lambda2``/``lambda3`` override the loss weights' defaults.
    """

    n_grad_steps: int = 5
    lr: float = 0.05
    lambda2: float | None = None
    lambda3: float | None = None
    backtracking: bool = True
    step_rule: str = "normalized"

    def __post_init__(self):
        if self.n_grad_steps < 0:
            raise ParameterError("n_grad_steps must be nonnegative")
        if self.lr <= 0:
            raise ParameterError("inner learning rate must be positive")
        if self.step_rule not in ("normalized", "plain"):
            raise ParameterError(f"unknown step rule {self.step_rule!r}")


class TrainingDiverged(NumericError):
    """Raised on a non-finite loss or gradient; carries the last finite policies."""

    def __init__(self, msg: str, last_good: PolicyPair, epoch: int, curve: list[float]):
        super().__init__(msg)
        self.last_good = last_good
        self.epoch = epoch
        self.curve = curve


@dataclass
class TrainResult:
    pols: PolicyPair
    curve: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    reverted: bool = False


def _update_net(net: Mlp, state: AdamState, grads: dict) -> Mlp:
    flat = net.qualified()
    return net.with_params(adam_step(state, flat, {k: grads[k] for k in flat}))


def _batch_streams(seed: int, epoch: int, b: int, n: int, d: int, T: int) -> NoiseStreams:
    return NoiseStreams.from_seed(int(np.random.SeedSequence([seed, epoch + 1, b]).generate_state(1)[0]),
                                  n, d, T)


def _loss(stage: int, pols, den, sched, gamma, batch: ObservationBatch, streams, weights):
    tape = ad.Tape()
    if stage == 1:
        cfg = GuidanceConfig(gamma, noise_active=True, controls_active=False)
        traj = ahvp_rollout(pols, den, sched, cfg, batch.cond, streams, tape=tape, record_kl=False)
        loss = stage1_loss(traj, batch.task, batch.y, weights)
    else:
        cfg = GuidanceConfig(gamma, noise_active=True, controls_active=True)
        traj = ahvp_rollout(pols, den, sched, cfg, batch.cond, streams, tape=tape,
                            detach_states=True, noise_tape=False)
        loss = stage2_loss(traj, batch.task, batch.y, weights, sched)
    return tape, loss


def training_loss(stage: int, pols: PolicyPair, den: Denoiser, sched: NoiseSchedule,
                  data: ObservationBatch, weights: LossWeights, seed: int = 0,
                  gamma: float = 1.0) -> float:
    """Loss over the whole dataset under fixed noise (for before/after comparisons)."""
    streams = _batch_streams(seed, -1, 0, len(data), pols.d, sched.T)
    return float(ad.value(_loss(stage, pols, den, sched, gamma, data, streams, weights)[1]))


def _train(stage: int, cfg: TrainConfig, data: ObservationBatch, den: Denoiser,
           sched: NoiseSchedule, pols: PolicyPair, weights: LossWeights, gamma: float) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    initial = training_loss(stage, pols, den, sched, data, weights, cfg.seed, gamma)
    res = TrainResult(pols, initial_loss=initial)
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data.subset(perm[start:start + cfg.batch_size])
            streams = _batch_streams(cfg.seed, epoch, b, len(batch), pols.d, sched.T)
            tape, loss = _loss(stage, res.pols, den, sched, gamma, batch, streams, weights)
            lv = float(ad.value(loss))
            if not np.isfinite(lv):
                raise TrainingDiverged(f"non-finite stage-{stage} loss at epoch {epoch} batch {b}",
                                       res.pols, epoch, res.curve)
            grads = ad.backward(tape, loss)
            try:
                if stage == 1:
                    noise = res.pols.noise
                    res.pols = res.pols.replace(
                        noise=type(noise)(_update_net(noise.net, state, grads), noise.d))
                else:
                    step = res.pols.step
                    res.pols = res.pols.replace(step=step.with_net(_update_net(step.net, state, grads)))
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}", res.pols, epoch,
                                       res.curve) from exc
            losses.append(lv * len(batch))
        res.curve.append(sum(losses) / n)
    res.final_loss = training_loss(stage, res.pols, den, sched, data, weights, cfg.seed, gamma)
    if res.final_loss > initial:
        res.pols, res.final_loss, res.reverted = pols, initial, True
    return res


def train_stage1(cfg: TrainConfig, data: ObservationBatch, den: Denoiser, sched: NoiseSchedule,
                 pols: PolicyPair, weights: LossWeights | None = None,
                 gamma: float = 1.0) -> TrainResult:
    """Adam on the stage-1 loss, backpropagating through the whole chain with controls off.

    If the fixed-noise training loss ends above its starting value the
    starting policies are returned (``reverted`` is set).
    """
    return _train(1, cfg, data, den, sched, pols, weights or LossWeights(), gamma)


def train_stage2(cfg: TrainConfig, data: ObservationBatch, den: Denoiser, sched: NoiseSchedule,
                 pols: PolicyPair, weights: LossWeights | None = None,
                 gamma: float = 1.0) -> TrainResult:
    """Adam on the per-step loss with the noise policy frozen and states detached."""
    return _train(2, cfg, data, den, sched, pols, weights or LossWeights(), gamma)


def _row_norm(g: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(g ** 2, axis=-1, keepdims=True))


def make_refiner(task: ForwardTask, y, den: Denoiser, sched: NoiseSchedule, rcfg: RefineConfig,
                 weights: LossWeights, gamma: float, counter: CallCounter):
    """The per-step hook used by :func:`shvp_refine`.

    Every ascent iteration costs one value-and-gradient evaluation (two
    denoiser calls) at the current candidate. A final forward call at the
    last candidate yields the step mean. Rejected candidates fall back to
    the best accepted point, so the objective never decreases.
    """
    w = LossWeights(weights.w_T, weights.w_control, weights.w_score,
                    rcfg.lambda2 if rcfg.lambda2 is not None else weights.lambda2,
                    rcfg.lambda3 if rcfg.lambda3 is not None else weights.lambda3)

    def refine(t, x_t, u0):
        mu_free = ad.value(denoise(den, sched, x_t, t, counter)[1])
        u = np.array(u0, dtype=np.float64)
        best = None
        lr = np.full((len(u), 1), rcfg.lr)
        for _ in range(rcfg.n_grad_steps):
            cand = (u, *shvp_step_objective(x_t, u, t, task, y, den, sched, w, gamma,
                                            mu_free, counter))
            counter.inner_iterations += 1
            if best is None:
                best = cand
            else:
                ok = cand[1] >= best[1] if rcfg.backtracking else np.ones(len(u), bool)
                lr = np.where(ok[:, None], lr, 0.5 * lr)
                best = tuple(np.where(ok.reshape((-1,) + (1,) * (np.ndim(c) - 1)), c, b)
                             for c, b in zip(cand, best))
            best_u, _, g, _, _ = best
            if rcfg.step_rule == "normalized":
                nrm = _row_norm(g)
                g = np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)
            u = best_u + lr * g
        x0_hat, mu_ctrl = denoise(den, sched, x_t + gamma * u, t, counter)
        x0_hat, mu_ctrl = ad.value(x0_hat), ad.value(mu_ctrl)
        if best is not None and rcfg.backtracking:
            val = (ad.value(log_likelihood(task, y, x0_hat))
                   - w.refine_lambda2(sched, t) * np.sum((mu_ctrl - mu_free) ** 2, axis=-1)
                   - w.refine_lambda3() * np.sum(u ** 2, axis=-1))
            worse = (val < best[1])[:, None]
            u = np.where(worse, best[0], u)
            x0_hat = np.where(worse, best[3], x0_hat)
            mu_ctrl = np.where(worse, best[4], mu_ctrl)
        return u, x0_hat, mu_ctrl, mu_free

    return refine


def shvp_refine(pols: PolicyPair, den: Denoiser, sched: NoiseSchedule, task: ForwardTask, y,
                cond, rcfg: RefineConfig, streams: NoiseStreams | int, *,
                weights: LossWeights | None = None, gamma: float = 1.0,
                counter: CallCounter | None = None) -> GuidedTrajectory:
    """Amortized rollout whose controls are polished by a few ascent steps per time step.

    Only the controls are refined; the initial noise comes from the noise
    policy unchanged. Denoiser calls per trajectory: ``2 T (1 + n_grad_steps)``.
    """
    counter = counter if counter is not None else CallCounter()
    hook = make_refiner(task, np.asarray(y), den, sched, rcfg, weights or LossWeights(), gamma,
                        counter)
    return ahvp_rollout(pols, den, sched, GuidanceConfig(gamma), cond, streams,
                        counter=counter, refine=hook)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    obs_id: int
    mse: float
    psnr: float
    residual: float
    terminal_loglik: float
    denoiser_calls: int
    policy_calls: int
    elbo: float = float("nan")

    FIELDS = ("method", "obs_id", "mse", "psnr", "residual", "terminal_loglik",
              "denoiser_calls", "policy_calls", "elbo")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in self.FIELDS)


def rollout_mode(mode: str, pols: PolicyPair | None, den: Denoiser, sched: NoiseSchedule,
                 task: ForwardTask, y, cond, streams: NoiseStreams, *, gamma: float = 1.0,
                 rcfg: RefineConfig | None = None, weights: LossWeights | None = None,
                 record_kl: bool = False) -> GuidedTrajectory:
    """One batched rollout under the named sampler."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "unguided" or pols is None:
        return unguided_rollout(den, sched, np.shape(streams.eps)[1], streams.batch, streams,
                                record_kl=record_kl)
    if mode == "stage1_only":
        return ahvp_rollout(pols, den, sched, GuidanceConfig(gamma, controls_active=False), cond,
                            streams, record_kl=record_kl)
    if mode == "ahvp":
        return ahvp_rollout(pols, den, sched, GuidanceConfig(gamma), cond, streams,
                            record_kl=record_kl)
    if mode == "ahvp_det":
        return ahvp_rollout(pols.deterministic(), den, sched, GuidanceConfig(gamma), cond, streams,
                            record_kl=record_kl)
    return shvp_refine(pols, den, sched, task, y, cond, rcfg or RefineConfig(), streams,
                       weights=weights, gamma=gamma)


def evaluate(pols: PolicyPair | None, den: Denoiser, sched: NoiseSchedule,
             test: ObservationBatch, mode: str, *, n_samples: int = 1, seed: int = 0,
             gamma: float = 1.0, rcfg: RefineConfig | None = None,
             weights: LossWeights | None = None, with_elbo: bool = False,
             peak: float = 1.0) -> list[MetricsRow]:
    """Per-observation metrics averaged over ``n_samples`` rollouts each.

    All observations and samples run as one batch, so call counts are per
    trajectory. PSNR uses ``peak`` as the signal range.
    """
    rep = test.repeat(n_samples)
    streams = NoiseStreams.from_seed(seed, len(rep), test.task.d, sched.T)
    record = with_elbo and mode not in ("unguided", "shvp")
    traj = rollout_mode(mode, pols, den, sched, rep.task, rep.y, rep.cond, streams, gamma=gamma,
                        rcfg=rcfg, weights=weights, record_kl=record)
    x0 = traj.x0
    err = np.mean((x0 - rep.x_true) ** 2, axis=-1)
    resid = np.linalg.norm(rep.y - ad.value(apply(rep.task, x0)), axis=-1)
    ll = ad.value(log_likelihood(rep.task, rep.y, x0))
    elbo = np.full(len(rep), np.nan)
    if record and pols is not None:
        use = pols.deterministic() if mode == "ahvp_det" else pols
        elbo = elbo_terms(traj, rep.task, rep.y, sched, use,
                          noise_active=mode != "unguided").elbo
    c = traj.counter
    rows = []
    for i in range(len(test)):
        sl = slice(i * n_samples, (i + 1) * n_samples)
        mse = float(np.mean(err[sl]))
        rows.append(MetricsRow(mode, i, mse, float(10 * np.log10(peak ** 2 / mse)),
                               float(np.mean(resid[sl])), float(np.mean(ll[sl])),
                               c.denoiser, c.policy_total, float(np.mean(elbo[sl]))))
    return rows


def summarize(rows: list[MetricsRow]) -> dict[str, float]:
    keys = ("mse", "psnr", "residual", "terminal_loglik", "elbo")
    out = {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
    out["denoiser_calls"] = rows[0].denoiser_calls if rows else 0
    out["policy_calls"] = rows[0].policy_calls if rows else 0
    return out
