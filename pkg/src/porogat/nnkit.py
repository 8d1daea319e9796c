"""Small explicit-backward neural-network kit on float64 numpy arrays.

Every layer exposes a forward function and a matching backward that returns
exact analytic gradients. There is no autograd tape; models compose these
pieces by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite values")


# -- initialisation -----------------------------------------------------------

def glorot(fan_out: int, fan_in: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), shape (fan_out, fan_in)."""
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-lim, lim, size=(fan_out, fan_in))


# -- layers -------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``y = x W^T + b`` with ``W`` of shape (out, in)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    y = x @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise ShapeError(f"dense: bias {b.shape} incompatible with weight {W.shape}")
        y = y + b
    return y


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)``."""
    if dy.shape != (x.shape[0], W.shape[0]):
        raise ShapeError(f"dense backward: grad {dy.shape} vs input {x.shape}, weight {W.shape}")
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=0.2):
    return np.where(x > 0, 1.0, slope)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dropout(x: np.ndarray, rate: float, gen: np.random.Generator | None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0 or gen is None:
        return x, None
    mask = (gen.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# -- losses -------------------------------------------------------------------

@dataclass(frozen=True)
class FocalLossParams:
    gamma: float = 2.0
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be > 0")


def inverse_frequency_weights(labels, n_classes: int = 2) -> tuple[float, ...]:
    """Weights proportional to 1/frequency, normalised to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one example")
    w = 1.0 / counts
    return tuple(w * n_classes / w.sum())


def focal_loss(logits: np.ndarray, labels: np.ndarray, params: FocalLossParams = FocalLossParams()):
    """Weighted focal loss on two-class logits.

    ``loss = mean_i -alpha_{y_i} (1 - p_t)^gamma log p_t``; the true-class
    probability is clamped to [1e-12, 1 - 1e-12]. Returns ``(loss, dlogits)``.
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"focal: logits {logits.shape} vs labels {labels.shape}")
    p = softmax_rows(logits)
    pt = np.clip(p[np.arange(n), labels], LOG_CLAMP, 1 - LOG_CLAMP)
    alpha = np.asarray(params.class_weights)[labels]
    g = params.gamma
    one_m = 1.0 - pt
    loss = np.mean(-alpha * one_m ** g * np.log(pt))
    # dL/dpt, then chain through softmax: dpt/dz = pt (onehot - p)
    dpt = alpha * (-(one_m ** g) / pt)
    if g > 0:
        dpt = dpt + alpha * g * one_m ** (g - 1) * np.log(pt)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), labels] = 1.0
    dlogits = (dpt * pt)[:, None] * (onehot - p) / n
    return float(loss), dlogits


def smoothed_cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.1,
                           weights: np.ndarray | None = None):
    """Label-smoothed cross-entropy, averaged over rows. Returns ``(loss, dlogits)``."""
    logits = np.atleast_2d(logits)
    n, k = logits.shape
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), np.asarray(labels, dtype=int)] += 1.0 - smoothing
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    loss = -(w * (target * logp).sum(axis=1)).sum() / n
    dlogits = w[:, None] * (np.exp(logp) - target) / n
    return float(loss), dlogits


# -- parameters and optimiser -------------------------------------------------

@dataclass
class ParamStore:
    """Named parameters with gradient and Adam moment buffers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient for {name}: {g.shape} vs parameter {self.params[name].shape}")
            self.grads[name][...] = g

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k][...] = v


def adam_step(store: ParamStore, lr: float = 1e-3, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam with bias-corrected moments and decoupled weight decay."""
    if not store.params:
        return
    store.t += 1
    c1 = 1.0 - beta1 ** store.t
    c2 = 1.0 - beta2 ** store.t
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)


# -- sampling -----------------------------------------------------------------

def sampling_weights(labels, minority_target: float | None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("weighted sampler needs both classes present")
    if minority_target is None:
        return np.full(labels.size, 1.0 / labels.size)
    minority = 1 if n1 <= n0 else 0
    w = np.where(labels == minority, minority_target / min(n0, n1),
                 (1 - minority_target) / max(n0, n1))
    return w / w.sum()


def weighted_sampler(labels, minority_target: float | None, batch_size: int,
                     gen: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn with replacement.

    With ``minority_target=None`` every index is equally likely; otherwise
    the expected minority share of each batch equals ``minority_target``.
    """
    w = sampling_weights(labels, minority_target)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    while True:
        yield np.searchsorted(cdf, gen.random(batch_size), side="right")


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], tolerance: float = 1e-6,
               max_coords: int | None = None, gen: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` reads the arrays in ``params`` (perturbed in place). The step
    is ``1e-5 * max(1, |theta|)``. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-4 * max|a|_param)`` so coordinates far below
    the parameter's gradient scale are judged against that scale.
    ``max_coords`` limits each parameter to a random subset of coordinates.
    """
    per_param = {}
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=float)
        if a.shape != p.shape:
            raise ShapeError(f"analytic gradient for {name}: {a.shape} vs {p.shape}")
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (gen or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        scale = max(np.abs(a).max(), 1e-12) * 1e-4
        worst = 0.0
        for i in idx:
            old = flat[i]
            h = 1e-5 * max(1.0, abs(old))
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), scale)
            worst = max(worst, err)
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(per_param.get(worst_name, 0.0), worst_name, per_param, tolerance)


# -- checkpoints --------------------------------------------------------------

def save_params(params: dict[str, np.ndarray], path: str | Path) -> None:
    """Named-matrix text format: ``name rows cols`` then one row-major line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for name, arr in params.items():
            a = np.asarray(arr, dtype=np.float64)
            rows, cols = (1, a.size) if a.ndim <= 1 else a.shape
            if a.ndim > 2:
                raise ShapeError(f"{name}: only 1-D/2-D arrays supported, got {a.shape}")
            kind = "vec" if a.ndim == 1 else "mat"
            fh.write(f"{name} {kind} {rows} {cols}\n")
            fh.write(" ".join(repr(float(x)) for x in a.ravel()) + "\n")


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    out = {}
    for k in range(0, len(lines), 2):
        name, kind, rows, cols = lines[k].split()
        vals = np.array([float(x) for x in lines[k + 1].split()]) if lines[k + 1] else np.zeros(0)
        rows, cols = int(rows), int(cols)
        if vals.size != rows * cols:
            raise ValueError(f"{path}:{k + 2}: {name} expects {rows * cols} values, got {vals.size}")
        out[name] = vals if kind == "vec" else vals.reshape(rows, cols)
    return out
