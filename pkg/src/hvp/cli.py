"""Command-line front end: ``hvp <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Exit status is 0 on success, 1 on a numeric failure (including a failed
check suite) and 2 on a configuration error. ``HVP_THREADS`` caps the
BLAS worker threads and must be read before numpy loads.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("HVP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import dataclasses  # noqa: E402

import numpy as np  # noqa: E402

from .config import ExperimentConfig, load_config, parse_config, serialize_config  # noqa: E402
from .errors import ConfigError, HvpError, NumericError, ParameterError, ToleranceError  # noqa: E402
from .experiments import (ABLATION_HEADER, Setup, build_policies, eval_modes, loss_weights,  # noqa: E402
                          make_setup, policy_ablation, shvp_ablation, train_config,
                          two_stage_ablation)
from .gradcheck import run_gradcheck  # noqa: E402
from .io import load_checkpoint, save_checkpoint, write_csv, write_manifest, write_samples  # noqa: E402
from .policies import NoiseStreams, PolicyPair  # noqa: E402
from .suite import elbo_bound, oracle_suite  # noqa: E402
from .training import MODES, MetricsRow, rollout_mode, summarize, train_stage1, train_stage2  # noqa: E402

COMMANDS = ("train-stage1", "train-stage2", "sample", "refine", "eval", "oracle-check", "ablate",
            "gradcheck")


class ChecksFailed(NumericError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvp", description="Hierarchical variational policies for "
                                "reward-guided diffusion sampling.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file (defaults when omitted)")
        s.add_argument("--seed", type=int, help="overrides the config's global seed")
        s.add_argument("--out", help="output directory (overrides config 'out')")
        s.add_argument("--checkpoint", help="policy checkpoint to load")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key; repeatable")
        if name == "sample":
            s.add_argument("--mode", default="ahvp", choices=[m for m in MODES if m != "shvp"])
        if name == "ablate":
            s.add_argument("--which", required=True, choices=("two-stage", "shvp", "policy"))
            s.add_argument("--n-seeds", type=int, default=3)
        if name == "oracle-check":
            s.add_argument("--quick", action="store_true", help="fewer Monte-Carlo samples")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    return dataclasses.replace(cfg, **updates)


def _load_policies(args, st: Setup) -> tuple[PolicyPair, float]:
    try:
        pols, sched, gamma = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if sched.T != st.sched.T or not np.array_equal(sched.rsigma, st.sched.rsigma):
        raise ConfigError("checkpoint schedule does not match the configured schedule")
    if pols.d != st.task.d or pols.noise.cond_dim != st.task.cond_dim:
        raise ConfigError("checkpoint dimensions do not match the configured task")
    return pols, gamma


class Run:
    """Output bookkeeping for one invocation; the manifest is written on close."""

    def __init__(self, command: str, cfg: ExperimentConfig, inputs: list[str] = ()):
        self.command, self.cfg, self.inputs = command, cfg, [p for p in inputs if p]
        os.makedirs(cfg.out, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> str:
        p = os.path.join(self.cfg.out, name)
        self.files.append(p)
        return p

    def close(self) -> str:
        extra = [f + ".csv" for f in self.files if f.endswith(".hvpx")]
        return write_manifest(self.cfg.out, self.command, serialize_config(self.cfg),
                              self.cfg.seed, self.files + extra, self.inputs)


def _metrics(run: Run, rows: list[MetricsRow]) -> None:
    write_csv(run.path("metrics.csv"), MetricsRow.FIELDS, [r.as_tuple() for r in rows])
    by_mode: dict[str, list[MetricsRow]] = {}
    for r in rows:
        by_mode.setdefault(r.method, []).append(r)
    keys = ("mse", "psnr", "residual", "terminal_loglik", "elbo", "denoiser_calls", "policy_calls")
    summary = [(m, *(summarize(rs)[k] for k in keys)) for m, rs in by_mode.items()]
    write_csv(run.path("summary.csv"), ("method", *keys), summary)
    for row in summary:
        print(f"{row[0]:<12} mse={row[1]:.5f} psnr={row[2]:.2f} residual={row[3]:.4f} "
              f"loglik={row[4]:.2f} denoiser_calls={row[6]} policy_calls={row[7]}")


def cmd_train(args, cfg: ExperimentConfig, stage: int) -> None:
    st = make_setup(cfg)
    run = Run(args.command, cfg, [args.checkpoint])
    if args.checkpoint:
        pols, _ = _load_policies(args, st)
    elif stage == 2:
        raise ConfigError("train-stage2 needs --checkpoint from train-stage1")
    else:
        pols = build_policies(cfg, st.task, cfg.seed)
    trainer = train_stage1 if stage == 1 else train_stage2
    res = trainer(train_config(cfg, stage, cfg.seed), st.train, st.den, st.sched, pols,
                  loss_weights(cfg.loss), cfg.policy.gamma)
    save_checkpoint(run.path(f"stage{stage}.hvp"), res.pols, st.sched, cfg.policy.gamma)
    write_csv(run.path(f"curve_stage{stage}.csv"), ("epoch", "loss"), list(enumerate(res.curve)))
    print(f"stage {stage}: loss {res.initial_loss:.6g} -> {res.final_loss:.6g}"
          + (" (reverted to initial policies)" if res.reverted else ""))
    run.close()


def cmd_sample(args, cfg: ExperimentConfig, mode: str) -> None:
    st = make_setup(cfg)
    if not args.checkpoint and mode != "unguided":
        raise ConfigError(f"{args.command} needs --checkpoint")
    pols, gamma = _load_policies(args, st) if args.checkpoint else (None, cfg.policy.gamma)
    cfg = dataclasses.replace(cfg, policy=dataclasses.replace(cfg.policy, gamma=gamma))
    run = Run(args.command, cfg, [args.checkpoint])
    n = cfg.eval.n_samples
    rep = st.test.repeat(n)
    streams = NoiseStreams.from_seed(cfg.seed, len(rep), st.task.d, st.sched.T)
    traj = rollout_mode(mode, pols, st.den, st.sched, rep.task, rep.y, rep.cond, streams,
                        gamma=gamma, rcfg=cfg.refine, weights=loss_weights(cfg.loss))
    index = [{"obs_id": i // n, "sample": i % n} for i in range(len(rep))]
    write_samples(run.path(f"samples_{mode}.hvpx"), traj.x0, index)
    rows = eval_modes(cfg, st, {mode: pols}, cfg.seed)
    _metrics(run, rows)
    run.close()


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    st = make_setup(cfg)
    run = Run(args.command, cfg, [args.checkpoint])
    if args.checkpoint:
        pols, gamma = _load_policies(args, st)
        cfg = dataclasses.replace(cfg, policy=dataclasses.replace(cfg.policy, gamma=gamma))
        modes = {m: pols for m in cfg.eval.modes}
    else:
        print("no checkpoint: evaluating the unguided sampler only")
        modes = {"unguided": None}
    _metrics(run, eval_modes(cfg, st, modes, cfg.seed))
    run.close()


def cmd_oracle_check(args, cfg: ExperimentConfig) -> None:
    run = Run(args.command, cfg)
    checks = oracle_suite(cfg.seed, quick=args.quick)
    bound, records = elbo_bound(seed=cfg.seed, n_traj=2_000 if args.quick else 10_000)
    checks.append(bound)
    for c in checks:
        print(c.line())
    write_csv(run.path("oracle_checks.csv"), ("check", "passed", "detail"),
              [(c.name, int(c.passed), c.detail) for c in checks])
    keys = list(records[0])
    write_csv(run.path("elbo_bound.csv"), keys, [[r[k] for k in keys] for r in records])
    run.close()
    if not all(c.passed for c in checks):
        raise ChecksFailed("oracle cross-validation failed")


def cmd_ablate(args, cfg: ExperimentConfig) -> None:
    run = Run(args.command, cfg)
    seeds = range(cfg.seed, cfg.seed + args.n_seeds)
    if args.which == "policy":
        header = ("seed", "policy", "obs_id", "std", "frac_above", "frac_below")
        rows = policy_ablation(cfg, seeds)
    else:
        header = ABLATION_HEADER
        rows = (two_stage_ablation if args.which == "two-stage" else shvp_ablation)(cfg, seeds)
    path = run.path(f"ablation_{args.which.replace('-', '_')}.csv")
    write_csv(path, header, rows)
    print(f"wrote {len(rows)} rows to {path}")
    run.close()


def cmd_gradcheck(args, cfg: ExperimentConfig) -> None:
    run = Run(args.command, cfg)
    checks = run_gradcheck(cfg.seed)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: rel err {c.rel_err:.3g} "
              f"over {c.n_points} points")
    write_csv(run.path("gradcheck.csv"), ("loss", "rel_err", "n_points", "passed"),
              [(c.name, c.rel_err, c.n_points, int(c.passed)) for c in checks])
    run.close()
    if not all(c.passed for c in checks):
        raise ChecksFailed("gradient check failed")


def dispatch(args, cfg: ExperimentConfig) -> None:
    cmd = args.command
    if cmd in ("train-stage1", "train-stage2"):
        cmd_train(args, cfg, int(cmd[-1]))
    elif cmd == "sample":
        cmd_sample(args, cfg, args.mode)
    elif cmd == "refine":
        cmd_sample(args, cfg, "shvp")
    elif cmd == "eval":
        cmd_eval(args, cfg)
    elif cmd == "oracle-check":
        cmd_oracle_check(args, cfg)
    elif cmd == "ablate":
        cmd_ablate(args, cfg)
    else:
        cmd_gradcheck(args, cfg)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        dispatch(args, cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"hvp: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ToleranceError, FloatingPointError) as exc:
        print(f"hvp: numeric failure: {exc}", file=sys.stderr)
        return 1
    except HvpError as exc:
        print(f"hvp: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
