"""Small multilayer perceptrons and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, ParameterError

_ACTIVATIONS = {
    "silu": ad.silu,
    "tanh": ad.tanh,
    "identity": lambda x: x,
}


def _activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "silu":
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return sig * (1.0 + z * (1.0 - sig))
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected network ``x @ W0 + b0 -> act -> ... -> x @ WL + bL``.

    Weights are stored as ``(fan_in, fan_out)`` so a batch of row vectors is
    mapped by right-multiplication. Treat instances as immutable; training
    produces new instances via :meth:`with_params`.
    """

    name: str
    widths: tuple[int, ...]
    params: dict[str, np.ndarray] = field(repr=False)
    activation: str = "silu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ParameterError("an Mlp needs at least input and output widths")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if self.params[f"W{i}"].shape != (n_in, n_out) or self.params[f"b{i}"].shape != (n_out,):
                raise DimensionError(f"layer {i} parameters do not match widths {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return int(sum(w * v + v for w, v in zip(self.widths[:-1], self.widths[1:])))

    def param_names(self) -> list[str]:
        return [f"{p}{i}" for i in range(self.n_layers) for p in ("W", "b")]

    def qualified(self) -> dict[str, np.ndarray]:
        """Parameters keyed as ``"<name>.<param>"``, the keys used on tapes."""
        return {f"{self.name}.{k}": self.params[k] for k in self.param_names()}

    def with_params(self, flat: dict[str, np.ndarray]) -> "Mlp":
        """New network taking any qualified keys present in ``flat``."""
        new = {k: np.array(flat.get(f"{self.name}.{k}", v), dtype=np.float64)
               for k, v in self.params.items()}
        return Mlp(self.name, self.widths, new, self.activation)

    def scaled(self, factor: float) -> "Mlp":
        return Mlp(self.name, self.widths, {k: v * factor for k, v in self.params.items()},
                   self.activation)


def init_mlp(name: str, widths, rng: np.random.Generator, *, zero_last: bool = True,
             activation: str = "silu", scale: float = 1.0) -> Mlp:
    """He-style normal init; the final layer is zeroed unless ``zero_last`` is False."""
    widths = tuple(int(w) for w in widths)
    params = {}
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last and zero_last:
            W = np.zeros((n_in, n_out))
        else:
            W = rng.normal(0.0, scale * np.sqrt(1.0 / n_in), size=(n_in, n_out))
        params[f"W{i}"] = W
        params[f"b{i}"] = np.zeros(n_out)
    return Mlp(name, widths, params, activation)


def mlp_forward(net: Mlp, x, tape: ad.Tape | None = None):
    """Apply ``net`` to a batch ``x`` of shape ``(B, widths[0])`` (or a single row).

    With a tape, the parameters are watched under their qualified names so
    :func:`hvp.autodiff.backward` returns gradients keyed the same way.
    """
    xv = ad.value(x)
    if xv.shape[-1] != net.widths[0]:
        raise DimensionError(f"{net.name}: input width {xv.shape[-1]} != {net.widths[0]}")
    act = _ACTIVATIONS[net.activation]
    h = x
    for i in range(net.n_layers):
        W, b = net.params[f"W{i}"], net.params[f"b{i}"]
        if tape is not None:
            W = tape.watch(f"{net.name}.W{i}", W)
            b = tape.watch(f"{net.name}.b{i}", b)
        h = h @ W + b
        if i < net.n_layers - 1:
            h = act(h)
    return h


def input_jacobian(net: Mlp, x: np.ndarray, cols: slice | None = None) -> np.ndarray:
    """Batched Jacobian ``d net(x) / d x[:, cols]`` of shape ``(B, out, n_cols)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx = np.arange(net.widths[0])[cols if cols is not None else slice(None)]
    J = np.zeros((x.shape[0], len(idx), net.widths[0]))
    J[:, np.arange(len(idx)), idx] = 1.0
    h = x
    for i in range(net.n_layers):
        W, b = net.params[f"W{i}"], net.params[f"b{i}"]
        z = h @ W + b
        J = J @ W
        if i < net.n_layers - 1:
            J = J * _activation_grad(net.activation, z)[:, None, :]
            h = ad.value(_ACTIVATIONS[net.activation](z))
        else:
            h = z
    return np.swapaxes(J, 1, 2)


def lipschitz_bound(net: Mlp, rows: slice | None = None) -> float:
    """Upper bound on the Lipschitz constant of ``net`` restricted to input ``rows``."""
    slope = {"silu": 1.0998, "tanh": 1.0, "identity": 1.0}[net.activation]
    bound = 1.0
    for i in range(net.n_layers):
        W = net.params[f"W{i}"]
        if i == 0 and rows is not None:
            W = W[rows]
        bound *= np.linalg.norm(W, 2)
        if i < net.n_layers - 1:
            bound *= slope
    return float(bound)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Parameters without a gradient are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
