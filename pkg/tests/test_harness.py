import dataclasses
import hashlib
import json
import os
import subprocess

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvp.cli import main
from hvp.config import ExperimentConfig, config_hash, load_config, parse_config, serialize_config
from hvp.diffusion import build_schedule
from hvp.errors import ConfigError, ContractError, DimensionError
from hvp.experiments import make_setup
from hvp.io import (file_hash, load_checkpoint, read_csv, read_samples, save_checkpoint, write_csv,
                    write_manifest, write_samples)
from hvp.policies import make_policies
from hvp.tasks import apply

SMALL = """\
prior.d = 4
prior.K = 2
train.epochs = 3
train.n_train = 32
train.n_test = 5
train.batch_size = 16
eval.n_samples = 2
policy.hidden = 16
noise_policy.hidden = 16
"""


# ---- config


def test_default_config_round_trips():
    cfg = ExperimentConfig()
    assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=30, deadline=None)
@given(d=st.sampled_from([2, 4, 8]), T=st.integers(1, 50), kappa=st.floats(1e-3, 1.0),
       hidden=st.lists(st.integers(1, 64), min_size=0, max_size=3), stochastic=st.booleans(),
       lambda2=st.one_of(st.none(), st.floats(0, 10)), kind=st.sampled_from(["pool", "mask", "hdr"]))
def test_config_round_trip(d, T, kappa, hidden, stochastic, lambda2, kind):
    base = ExperimentConfig()
    cfg = dataclasses.replace(
        base, prior=dataclasses.replace(base.prior, d=d),
        schedule=dataclasses.replace(base.schedule, T=T),
        policy=dataclasses.replace(base.policy, kappa=kappa, hidden=tuple(hidden),
                                   stochastic=stochastic),
        loss=dataclasses.replace(base.loss, lambda2=lambda2),
        task=dataclasses.replace(base.task, kind=kind))
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    assert config_hash(parse_config(text)) == config_hash(cfg)


def test_config_comments_and_overrides():
    cfg = parse_config("# header\nseed = 7  # trailing\n\ntrain.lr = 3e-3\npolicy.hidden = 8, 8\n")
    assert (cfg.seed, cfg.train.lr, cfg.policy.hidden) == (7, 3e-3, (8, 8))
    assert parse_config("train.epochs = 2", cfg).seed == 7


@pytest.mark.parametrize("text", ["bogus = 1", "train.bogus = 1", "nosuch.key = 1", "train = 1",
                                  "train.epochs = many", "policy.stochastic = maybe",
                                  "just words", "train.epochs = -3"])
def test_bad_config_raises(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.cfg"))


# ---- files


def test_checkpoint_round_trip(tmp_path):
    pols = make_policies(3, 5, np.random.default_rng(0), zero_last=False, kappa=0.2,
                         stochastic=False, step_hidden=(7, 4), noise_hidden=(6,))
    sched = build_schedule(5, eta=0.3, final_std=0.02)
    path = str(tmp_path / "p.hvp")
    save_checkpoint(path, pols, sched, gamma=1.5)
    back, s2, gamma = load_checkpoint(path)
    assert gamma == 1.5 and back.step.kappa == 0.2 and not back.step.stochastic
    assert (s2.T, s2.eta, s2.final_std) == (5, 0.3, 0.02)
    np.testing.assert_array_equal(s2.rsigma, sched.rsigma)
    for a, b in ((pols.noise.net, back.noise.net), (pols.step.net, back.step.net)):
        assert (a.name, a.widths, a.activation) == (b.name, b.widths, b.activation)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])


def test_truncated_or_foreign_checkpoint(tmp_path):
    pols = make_policies(2, 1, np.random.default_rng(0))
    path = tmp_path / "p.hvp"
    save_checkpoint(str(path), pols, build_schedule())
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ContractError):
        load_checkpoint(str(path))
    path.write_bytes(b"JUNK" + data[4:])
    with pytest.raises(ContractError):
        load_checkpoint(str(path))


@pytest.mark.parametrize("n", [0, 1, 9])
def test_samples_round_trip(tmp_path, n):
    x = np.random.default_rng(n).normal(size=(n, 3))
    path = str(tmp_path / "s.hvpx")
    write_samples(path, x, [{"obs_id": i // 2, "sample": i % 2} for i in range(n)])
    back = read_samples(path)
    assert back.shape == (n, 3)
    np.testing.assert_array_equal(back, x)
    idx = read_csv(path + ".csv")
    assert [int(r["row"]) for r in idx] == list(range(n))


def test_samples_validation(tmp_path):
    with pytest.raises(DimensionError):
        write_samples(str(tmp_path / "s.hvpx"), np.zeros((2, 2, 2)))
    with pytest.raises(DimensionError):
        write_samples(str(tmp_path / "s.hvpx"), np.zeros((2, 2)), [{}])


@settings(max_examples=50)
@given(v=st.floats(allow_nan=False, allow_infinity=True))
def test_csv_floats_round_trip_exactly(tmp_path_factory, v):
    path = str(tmp_path_factory.mktemp("csv") / "f.csv")
    write_csv(path, ("x",), [(v,)])
    assert float(read_csv(path)[0]["x"]) == v


def test_file_hash_is_git_blob_hash(tmp_path):
    path = tmp_path / "blob.txt"
    path.write_bytes(b"hello\n")
    assert file_hash(str(path)) == "ce013625030ba8dba906f756967f9e9ca394464a"
    try:
        out = subprocess.run(["git", "hash-object", str(path)], capture_output=True, text=True)
    except FileNotFoundError:
        return
    if out.returncode == 0:
        assert out.stdout.strip() == file_hash(str(path))


def test_manifest_contents(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    produced = out / "a.csv"
    produced.write_text("x\n1\n")
    source = tmp_path / "in.hvp"
    source.write_bytes(b"abc")
    text = serialize_config(ExperimentConfig())
    m = json.loads(open(write_manifest(str(out), "eval", text, 3, [str(produced)],
                                       [str(source)])).read())
    assert m["command"] == "eval" and m["seed"] == 3 and m["config"] == text
    assert m["config_sha256"] == hashlib.sha256(text.encode()).hexdigest()
    assert m["files"] == {"a.csv": file_hash(str(produced))}
    assert m["inputs"] == {str(source): file_hash(str(source))}


# ---- command line


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def _run(cfg_file, out, *args):
    return main([*args, "--config", cfg_file, "--out", str(out)])


def test_cli_train_sample_eval_pipeline(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert _run(cfg_file, out, "train-stage1", "--seed", "1") == 0
    assert _run(cfg_file, out, "train-stage2", "--seed", "1", "--checkpoint",
                str(out / "stage1.hvp")) == 0
    ckpt = str(out / "stage2.hvp")
    for mode in ("ahvp", "unguided"):
        assert _run(cfg_file, out, "sample", "--seed", "1", "--mode", mode, "--checkpoint", ckpt) == 0
    assert _run(cfg_file, out, "refine", "--seed", "1", "--checkpoint", ckpt) == 0
    assert _run(cfg_file, out, "eval", "--seed", "1", "--checkpoint", ckpt) == 0
    names = set(os.listdir(out))
    assert {"stage1.hvp", "stage2.hvp", "curve_stage1.csv", "curve_stage2.csv",
            "samples_ahvp.hvpx", "samples_ahvp.hvpx.csv", "samples_shvp.hvpx", "metrics.csv",
            "summary.csv", "manifest_train-stage1.json", "manifest_eval.json"} <= names
    assert len(read_csv(str(out / "curve_stage2.csv"))) == 3
    summary = {r["method"]: r for r in read_csv(str(out / "summary.csv"))}
    assert set(summary) == {"unguided", "stage1_only", "ahvp", "shvp"}
    assert int(summary["shvp"]["denoiser_calls"]) == 96
    m = json.load(open(out / "manifest_train-stage2.json"))
    assert m["inputs"] == {str(out / "stage1.hvp"): file_hash(str(out / "stage1.hvp"))}
    assert m["files"]["stage2.hvp"] == file_hash(ckpt)
    assert "loglik=" in capsys.readouterr().out


def test_cli_residual_recomputed_from_sample_file(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert _run(cfg_file, out, "sample", "--mode", "unguided", "--seed", "4") == 0
    cfg = parse_config("seed = 4", load_config(cfg_file))
    st_ = make_setup(cfg)
    x = read_samples(str(out / "samples_unguided.hvpx"))
    n = cfg.eval.n_samples
    rep = st_.test.repeat(n)
    resid = np.linalg.norm(rep.y - apply(rep.task, x), axis=-1).reshape(-1, n).mean(1)
    rows = read_csv(str(out / "metrics.csv"))
    np.testing.assert_allclose([float(r["residual"]) for r in rows], resid, rtol=1e-12)


def test_cli_is_reproducible(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(cfg_file, out, "train-stage1", "--seed", "2") == 0
    assert file_hash(str(a / "stage1.hvp")) == file_hash(str(b / "stage1.hvp"))


def test_cli_eval_without_checkpoint_runs_unguided(tmp_path, cfg_file, capsys):
    assert _run(cfg_file, tmp_path, "eval") == 0
    assert "unguided sampler only" in capsys.readouterr().out
    assert [r["method"] for r in read_csv(str(tmp_path / "summary.csv"))] == ["unguided"]


@pytest.mark.parametrize("args", [["train-stage2"], ["sample", "--mode", "ahvp"], ["refine"],
                                  ["eval", "--checkpoint", "/nonexistent/x.hvp"],
                                  ["eval", "--set", "train.bogus=1"],
                                  ["eval", "--set", "task.kind=blur"]])
def test_cli_config_errors_exit_2(tmp_path, cfg_file, capsys, args):
    assert _run(cfg_file, tmp_path, *args) == 2
    assert capsys.readouterr().err.startswith("hvp: config error")


def test_cli_checkpoint_mismatch_exits_2(tmp_path, cfg_file):
    assert _run(cfg_file, tmp_path, "train-stage1") == 0
    ckpt = str(tmp_path / "stage1.hvp")
    assert _run(cfg_file, tmp_path, "eval", "--checkpoint", ckpt, "--set", "schedule.T=4") == 2
    assert _run(cfg_file, tmp_path, "eval", "--checkpoint", ckpt, "--set", "prior.d=8") == 2


def test_cli_usage_error_and_missing_config(tmp_path):
    assert main(["no-such-command"]) == 2
    assert main(["eval", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_cli_numeric_failure_exits_1(tmp_path, cfg_file, capsys, monkeypatch):
    from hvp import cli
    from hvp.gradcheck import GradCheck
    monkeypatch.setattr(cli, "run_gradcheck", lambda seed: [GradCheck("fake", 1.0, 5)])
    assert _run(cfg_file, tmp_path, "gradcheck") == 1
    assert "numeric failure" in capsys.readouterr().err


def test_cli_gradcheck_passes(tmp_path, cfg_file):
    assert _run(cfg_file, tmp_path, "gradcheck") == 0
    rows = read_csv(str(tmp_path / "gradcheck.csv"))
    assert len(rows) >= 8 and all(r["passed"] == "1" for r in rows)


def test_cli_oracle_check_quick(tmp_path, cfg_file, capsys):
    assert _run(cfg_file, tmp_path, "oracle-check", "--quick") == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) == 4 and all(l.startswith("PASS") for l in lines)
    assert len(read_csv(str(tmp_path / "elbo_bound.csv"))) == 100


def test_cli_two_stage_ablation_small(tmp_path, cfg_file):
    assert _run(cfg_file, tmp_path, "ablate", "--which", "two-stage", "--n-seeds", "2") == 0
    rows = read_csv(str(tmp_path / "ablation_two_stage.csv"))
    assert len(rows) == 2 * 2 * 5
    assert {r["method"] for r in rows} == {"stage1_only", "ahvp"}
    assert {r["seed"] for r in rows} == {"0", "1"}
