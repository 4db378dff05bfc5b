"""Checkpoint, sample, CSV and manifest files."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct

import numpy as np

from .diffusion import NoiseSchedule, build_schedule
from .errors import ContractError, DimensionError
from .nn import Mlp
from .policies import NoisePolicy, PolicyPair, StepPolicy

CKPT_MAGIC = b"HVP1"
SAMPLE_MAGIC = b"HVPX"


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ContractError("truncated file")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def string(self) -> str:
        (n,) = self.take("<I")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b.decode()

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.buf):
            raise ContractError("truncated file")
        a = np.frombuffer(self.buf, "<f8", n, self.pos).reshape(shape).copy()
        self.pos += 8 * n
        return a


def save_checkpoint(path: str, pols: PolicyPair, sched: NoiseSchedule, gamma: float = 1.0) -> None:
    """``HVP1`` | u32 networks | per network: name, activation, widths, W/b row-major f64 | gamma,
    kappa, stochastic flag and schedule parameters."""
    out = [CKPT_MAGIC, struct.pack("<I", 2)]
    for net in (pols.noise.net, pols.step.net):
        out += [_pack_str(net.name), _pack_str(net.activation),
                struct.pack("<I", len(net.widths)), struct.pack(f"<{len(net.widths)}I", *net.widths)]
        for i in range(net.n_layers):
            out.append(np.ascontiguousarray(net.params[f"W{i}"], "<f8").tobytes())
            out.append(np.ascontiguousarray(net.params[f"b{i}"], "<f8").tobytes())
    out.append(struct.pack("<ddB", gamma, pols.step.kappa, int(pols.step.stochastic)))
    out.append(struct.pack("<IIdddd", sched.T, sched.n_base, sched.beta_min, sched.beta_max,
                           sched.eta, sched.final_std))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path: str) -> tuple[PolicyPair, NoiseSchedule, float]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take("<4s")[0] != CKPT_MAGIC:
        raise ContractError(f"{path}: not an HVP1 checkpoint")
    (n_nets,) = r.take("<I")
    nets = []
    for _ in range(n_nets):
        name, act = r.string(), r.string()
        (nw,) = r.take("<I")
        widths = r.take(f"<{nw}I")
        params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"W{i}"] = r.array((a, b))
            params[f"b{i}"] = r.array((b,))
        nets.append(Mlp(name, tuple(widths), params, act))
    gamma, kappa, stoch = r.take("<ddB")
    T, n_base, bmin, bmax, eta, fstd = r.take("<IIdddd")
    sched = build_schedule(T, bmin, bmax, eta, n_base=n_base, final_std=fstd)
    d = nets[0].widths[-1]
    pols = PolicyPair(NoisePolicy(nets[0], d), StepPolicy(nets[1], d, kappa, bool(stoch)))
    return pols, sched, gamma


def write_samples(path: str, x: np.ndarray, index: list[dict] | None = None) -> None:
    """``HVPX`` | u32 count | u32 d | row-major f64 samples, plus ``<path>.csv`` index."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        x = x.reshape(0, x.shape[-1] if x.ndim == 2 else 0)
    if x.ndim != 2:
        raise DimensionError("samples must be a (count, d) array")
    if index is not None and len(index) != len(x):
        raise DimensionError("index rows must match sample count")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC + struct.pack("<II", *x.shape))
        fh.write(np.ascontiguousarray(x, "<f8").tobytes())
    rows = index if index is not None else [{} for _ in range(len(x))]
    keys = sorted({k for r in rows for k in r})
    write_csv(path + ".csv", ["row", *keys], [[i, *(r.get(k, "") for k in keys)]
                                               for i, r in enumerate(rows)])


def read_samples(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take("<4s")[0] != SAMPLE_MAGIC:
        raise ContractError(f"{path}: not an HVPX sample file")
    n, d = r.take("<II")
    return r.array((n, d))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_hash(path: str) -> str:
    """Git blob hash: ``sha1(b"blob <size>\\0" + content)``."""
    h = hashlib.sha1(f"blob {os.path.getsize(path)}\0".encode())
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, cfg_text: str, seed: int, files: list[str],
                   inputs: list[str] = ()) -> str:
    """``manifest_<command>.json`` with the config text and hash, the seed, and content
    hashes of input and output files."""
    manifest = {
        "command": command,
        "seed": seed,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "config": cfg_text,
        "inputs": {f: file_hash(f) for f in inputs},
        "files": {os.path.relpath(f, out_dir): file_hash(f) for f in files if os.path.exists(f)},
    }
    path = os.path.join(out_dir, f"manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
