"""Measurement operators and the Gaussian observation likelihood."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ParameterError

SIGMA_Y = 0.01
INPAINT_DROP = 0.9


@dataclass(frozen=True, eq=False)
class ForwardTask:
    """Degradation ``A`` plus observation noise ``sigma_y``.

    ``kind`` is one of ``dense``, ``pool``, ``mask`` or ``hdr``. Linear kinds
    other than ``mask`` carry an explicit ``(m, d)`` matrix. A ``mask`` task
    either carries its 0/1 diagonal (shape ``(d,)``, or ``(B, d)`` for a
    stacked batch of observations) or is a template with ``drop_prob`` set,
    in which case each observation draws its own mask.
    """

    kind: str
    d: int
    m: int
    sigma_y: float = SIGMA_Y
    matrix: np.ndarray | None = None
    mask: np.ndarray | None = None
    drop_prob: float | None = None
    alpha: float = 2.0
    beta: float = 0.0
    factor: int = 1

    def __post_init__(self):
        if self.sigma_y <= 0:
            raise ParameterError("sigma_y must be positive")
        if self.kind in ("dense", "pool"):
            if self.matrix is None or self.matrix.shape != (self.m, self.d):
                raise DimensionError("linear task needs an (m, d) matrix")
        elif self.kind == "mask":
            if self.mask is None and self.drop_prob is None:
                raise ParameterError("mask task needs a mask or a drop probability")
            if self.mask is not None:
                if self.mask.shape[-1] != self.d or not np.all(np.isin(self.mask, (0.0, 1.0))):
                    raise ParameterError("mask entries must be 0 or 1 over d coordinates")
        elif self.kind != "hdr":
            raise ParameterError(f"unknown task kind {self.kind!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind != "hdr"

    @property
    def random_mask(self) -> bool:
        return self.kind == "mask" and self.drop_prob is not None

    @property
    def cond_dim(self) -> int:
        """Width of the conditioning features the policies see."""
        return self.m + (self.d if self.random_mask else 0)

    def dense_matrix(self) -> np.ndarray:
        """The operator as an ``(m, d)`` matrix (single-mask or linear tasks only)."""
        if self.kind in ("dense", "pool"):
            return self.matrix
        if self.kind == "mask" and self.mask is not None and self.mask.ndim == 1:
            return np.diag(self.mask)
        raise ParameterError(f"{self.kind} task has no single dense matrix")

    def with_mask(self, mask: np.ndarray) -> "ForwardTask":
        return replace(self, mask=np.asarray(mask, dtype=np.float64))


def dense_task(A: np.ndarray, sigma_y: float = SIGMA_Y) -> ForwardTask:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    return ForwardTask("dense", A.shape[1], A.shape[0], sigma_y, matrix=A)


def pool_matrix(d: int, factor: int, layout: str = "auto") -> np.ndarray:
    """Block-average operator. ``auto`` uses a square 2-D layout for square ``d >= 16``."""
    side = int(round(np.sqrt(d)))
    if layout == "auto":
        layout = "2d" if side * side == d and d >= 16 else "1d"
    if layout == "1d":
        if d % factor:
            raise ParameterError(f"d={d} not divisible by factor {factor}")
        m = d // factor
        P = np.zeros((m, d))
        for i in range(m):
            P[i, i * factor:(i + 1) * factor] = 1.0 / factor
        return P
    if layout != "2d":
        raise ParameterError(f"unknown layout {layout!r}")
    if side * side != d or side % factor:
        raise ParameterError(f"d={d} is not a square image divisible by factor {factor}")
    out = side // factor
    P = np.zeros((out * out, d))
    for r in range(out):
        for c in range(out):
            for i in range(factor):
                for j in range(factor):
                    P[r * out + c, (r * factor + i) * side + c * factor + j] = 1.0 / factor ** 2
    return P


def pool_task(d: int, factor: int = 2, sigma_y: float = SIGMA_Y, layout: str = "auto") -> ForwardTask:
    P = pool_matrix(d, factor, layout)
    return ForwardTask("pool", d, P.shape[0], sigma_y, matrix=P, factor=factor)


def mask_task(d: int, mask=None, drop_prob: float | None = INPAINT_DROP,
              sigma_y: float = SIGMA_Y) -> ForwardTask:
    if mask is not None:
        return ForwardTask("mask", d, d, sigma_y, mask=np.asarray(mask, dtype=np.float64))
    if not 0.0 <= drop_prob < 1.0:
        raise ParameterError("drop probability must lie in [0, 1)")
    return ForwardTask("mask", d, d, sigma_y, drop_prob=float(drop_prob))


def hdr_task(d: int, alpha: float = 2.0, beta: float = 0.0, sigma_y: float = SIGMA_Y) -> ForwardTask:
    return ForwardTask("hdr", d, d, sigma_y, alpha=alpha, beta=beta)


def apply(task: ForwardTask, x0):
    """``A(x0)`` for a single state ``(d,)`` or a batch ``(B, d)``."""
    xv = ad.value(x0)
    if xv.shape[-1] != task.d:
        raise DimensionError(f"state dim {xv.shape[-1]} != task dim {task.d}")
    if task.kind in ("dense", "pool"):
        return x0 @ task.matrix.T
    if task.kind == "mask":
        if task.mask is None:
            raise ParameterError("mask template has no drawn mask; use make_observation")
        return x0 * task.mask
    return ad.clip(task.alpha * x0 + task.beta, 0.0, 1.0)


def log_likelihood(task: ForwardTask, y, x0):
    """``log N(y; A(x0), sigma_y^2 I)`` summed over measurement coordinates."""
    r = y - apply(task, x0)
    const = -0.5 * task.m * np.log(2 * np.pi * task.sigma_y ** 2)
    return const - ad.sum(ad.square(r), axis=-1) / (2 * task.sigma_y ** 2)


@dataclass(frozen=True, eq=False)
class Observation:
    y: np.ndarray
    task: ForwardTask
    x_true: np.ndarray
    seed: int

    @property
    def cond(self) -> np.ndarray:
        return cond_features(self.task, self.y)


def cond_features(task: ForwardTask, y) -> np.ndarray:
    """Policy conditioning: ``y``, plus the drawn mask when masks vary per observation."""
    if task.random_mask:
        return np.concatenate([y, np.broadcast_to(task.mask, np.shape(y))], axis=-1)
    return np.asarray(y)


def make_observation(task: ForwardTask, x_true, seed: int, noiseless: bool = False) -> Observation:
    """Draw ``y = A(x_true) + sigma_y z`` (and the mask, for random inpainting)."""
    x_true = np.asarray(x_true, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if task.random_mask:
        task = task.with_mask((rng.random(task.d) >= task.drop_prob).astype(np.float64))
    y = apply(task, x_true)
    if not noiseless:
        y = y + task.sigma_y * rng.standard_normal(task.m)
    return Observation(np.asarray(y), task, x_true, seed)


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """Stacked observations sharing an operator kind (masks stack row-wise)."""

    y: np.ndarray
    task: ForwardTask
    x_true: np.ndarray
    seeds: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def cond(self) -> np.ndarray:
        return cond_features(self.task, self.y)

    def subset(self, idx) -> "ObservationBatch":
        idx = np.asarray(idx)
        task = self.task
        if task.kind == "mask" and task.mask is not None and task.mask.ndim == 2:
            task = task.with_mask(task.mask[idx])
        return ObservationBatch(self.y[idx], task, self.x_true[idx],
                                tuple(self.seeds[i] for i in idx))

    def repeat(self, n: int) -> "ObservationBatch":
        """Each observation repeated ``n`` times consecutively."""
        return self.subset(np.repeat(np.arange(len(self)), n))


def stack_observations(obs: list[Observation]) -> ObservationBatch:
    task = obs[0].task
    if task.kind == "mask":
        task = task.with_mask(np.stack([np.broadcast_to(o.task.mask, (task.d,)) for o in obs]))
    return ObservationBatch(np.stack([o.y for o in obs]), task,
                            np.stack([o.x_true for o in obs]), tuple(o.seed for o in obs))


def make_dataset(task: ForwardTask, x_true: np.ndarray, seed: int) -> ObservationBatch:
    """One observation per row of ``x_true`` with reproducible per-row seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(len(x_true)).tolist()
    return stack_observations([make_observation(task, x, int(s)) for x, s in zip(x_true, seeds)])
