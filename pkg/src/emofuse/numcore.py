"""Dense float64 math shared by every training stage.

Forward ops come with closed-form gradients (no autodiff tape); Adam with
decoupled weight decay drives the updates; `finite_diff_check` is the
central-difference oracle every composite loss in the repo is verified
against. Training math stays in float64 so that oracle is meaningful;
on-disk feature storage is float32 (see data module).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError, NumericError, OracleError


def as_f64(x) -> np.ndarray:
    """C-contiguous float64 view/copy of x."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B for 2-D arrays; raises DimensionError naming both shapes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    """Subgradient mask of relu: 1 where x > 0, else 0 (0 at exactly 0)."""
    return (x > 0.0).astype(np.float64)


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a vector: exp(v - max) / sum."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ArgumentError(f"softmax needs a nonempty vector, got shape {v.shape}")
    e = np.exp(v - v.max())
    return e / e.sum()


def cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[target] and its gradient softmax(logits) - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ArgumentError(f"cross_entropy needs a nonempty vector, got shape {logits.shape}")
    if not 0 <= target < logits.size:
        raise ArgumentError(f"target {target} out of range for {logits.size} classes")
    m = logits.max()
    e = np.exp(logits - m)
    s = e.sum()
    loss = float(m + np.log(s) - logits[target])
    grad = e / s
    grad[target] -= 1.0
    return loss, grad


def mse(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared error (1/d) sum (a-b)^2 with gradients for both arguments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.size
    diff = a - b
    loss = float((diff * diff).sum() / d)
    ga = 2.0 * diff / d
    return loss, ga, -ga


class ParamSet:
    """Named float64 parameter tensors with parallel gradient buffers.

    Insertion order is the canonical iteration order (checkpoints and Adam
    rely on it). Gradient buffers always match their parameter's shape.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise ArgumentError(f"parameter '{name}' already registered")
        p = as_f64(value).copy()
        self._params[name] = p
        self._grads[name] = np.zeros_like(p)
        return p

    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, g) -> None:
        g = np.asarray(g)
        buf = self._grads[name]
        if g.shape != buf.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter '{name}' {buf.shape}"
            )
        buf += g

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self._params.items():
            out._params[name] = p.copy()
            out._grads[name] = self._grads[name].copy()
        return out

    def load_values(self, other) -> None:
        """Copy values from another ParamSet or a name->array mapping, in place."""
        src_map = other._params if isinstance(other, ParamSet) else other
        unknown = set(src_map) - set(self._params)
        if unknown:
            raise ArgumentError(f"unexpected parameters: {sorted(unknown)}")
        for name in self._params:
            if name not in src_map:
                raise ArgumentError(f"missing parameter '{name}'")
            src = as_f64(src_map[name])
            if src.shape != self._params[name].shape:
                raise DimensionError(
                    f"parameter '{name}' shape {src.shape} vs {self._params[name].shape}"
                )
            self._params[name][...] = src


class AdamState:
    """Adam hyperparameters plus per-parameter moments and the step counter.

    weight_decay is decoupled by default (applied to the parameter after the
    Adam update); coupled_weight_decay=True adds it to the gradient instead.
    """

    def __init__(
        self,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        coupled_weight_decay: bool = False,
    ):
        if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ArgumentError("invalid Adam hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.coupled_weight_decay = coupled_weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: ParamSet, state: AdamState, names=None) -> None:
    """One Adam step, in place; `names` restricts the update to that subset.

    Parameters outside `names` are untouched (no decay, no moment update).
    Rejects the whole step (no mutation) if any updated gradient is non-finite.
    """
    active = params.names() if names is None else tuple(names)
    for name in active:
        if name not in params:
            raise ArgumentError(f"unknown parameter '{name}'")
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'; step rejected")
    state.t += 1
    for name in active:
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adam_update(
            p.ravel(),
            params.grad(name).ravel(),
            state.m[name].ravel(),
            state.v[name].ravel(),
            state.t,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
            state.coupled_weight_decay,
        )


def finite_diff_check(
    loss_fn,
    params: ParamSet,
    h: float = 1e-6,
    rng: np.random.Generator | None = None,
    subsample_threshold: int = 256,
    subsample: int = 64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return a scalar and populate params' gradients, and
    must be deterministic (checked by evaluating twice). Tensors larger than
    subsample_threshold entries are probed at `subsample` random coordinates.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-5). The
    floor must sit above the central-difference noise level (~eps*|loss|/h,
    about 1e-9 for unit-scale losses) divided by the 1e-4 tolerance this
    check is held to; otherwise coordinates whose true gradient is tiny
    measure roundoff rather than correctness. Systematic gradient bugs
    corrupt large coordinates too, so the floor costs no detection power.
    """
    l1 = float(loss_fn(params))
    analytic = {name: params.grad(name).copy() for name in params.names()}
    l2 = float(loss_fn(params))
    if l1 != l2:
        raise OracleError(f"loss_fn is not deterministic: {l1!r} != {l2!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    for name in params.names():
        flat = params[name].ravel()
        aflat = analytic[name].ravel()
        if flat.size <= subsample_threshold:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=subsample, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(loss_fn(params))
            flat[c] = orig - h
            fm = float(loss_fn(params))
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(aflat[c] - numeric) / max(abs(aflat[c]), abs(numeric), 1e-5)
            if rel > max_rel:
                max_rel = rel
    return max_rel
