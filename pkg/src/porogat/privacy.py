"""Importance-weighted anisotropic Gaussian release of fused embeddings.

The budget ``epsilon`` is split over coordinates in proportion to
``(q_d + eta) ** beta``; each coordinate gets ``delta / D`` and Gaussian
noise with ``sigma_d = 2 C_tot sqrt(2 ln(1.25 / delta_d)) / epsilon_d``.
``beta = 0`` is the isotropic (uniform) mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RngHandle, box_muller


class ReleaseError(RuntimeError):
    """A record was released twice in one run."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    beta: float = 0.6
    eta: float = 0.01
    c_img: float = 1.0
    c_ctx: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.beta < 0 or not self.eta > 0:
            raise ValueError("need beta >= 0 and eta > 0")
        if not (self.c_img > 0 and self.c_ctx > 0):
            raise ValueError("clip bounds must be > 0")

    @property
    def c_tot(self) -> float:
        return math.sqrt(self.c_img ** 2 + self.c_ctx ** 2)


@dataclass(frozen=True)
class NoiseSchedule:
    eps: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray

    @property
    def D(self) -> int:
        return self.eps.size

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write("d\teps_d\tdelta_d\tsigma_d\n")
            for d in range(self.D):
                fh.write(f"{d}\t{float(self.eps[d])!r}\t{float(self.delta[d])!r}\t{float(self.sigma[d])!r}\n")

    @classmethod
    def read(cls, path: str | Path) -> "NoiseSchedule":
        rows = [r.split("\t") for r in Path(path).read_text().splitlines()[1:] if r]
        arr = np.array([[float(x) for x in r[1:]] for r in rows])
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


def gaussian_sigma(eps_d, delta_d, c_tot: float):
    """``2 C_tot sqrt(2 ln(1.25 / delta_d)) / eps_d`` (elementwise)."""
    return 2.0 * c_tot * np.sqrt(2.0 * np.log(1.25 / np.asarray(delta_d))) / np.asarray(eps_d)


def nearest_rank(values, quantile: float) -> float:
    """Nearest-rank empirical quantile: the ceil(q n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("cannot take a quantile of an empty set")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    rank = max(1, math.ceil(quantile * v.size - 1e-9))
    return float(v[rank - 1])


def fit_clip_bounds(z_img: np.ndarray, z_ctx: np.ndarray, quantile: float = 0.95):
    """Per-modality clip bounds from training-split embedding norms."""
    z_img, z_ctx = np.atleast_2d(z_img), np.atleast_2d(z_ctx)
    if z_img.shape[0] == 0:
        raise ValueError("empty training set")
    c_img = nearest_rank(np.linalg.norm(z_img, axis=1), quantile)
    c_ctx = nearest_rank(np.linalg.norm(z_ctx, axis=1), quantile)
    # an all-zero block would make the bound degenerate
    tiny = np.finfo(float).tiny
    return max(c_img, tiny), max(c_ctx, tiny)


def clip_block(u: np.ndarray, bound: float) -> np.ndarray:
    """``u / max(1, ||u||_2 / bound)`` row-wise."""
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(u), axis=1)
    factor = np.maximum(1.0, norms / bound)
    out = np.atleast_2d(u) / factor[:, None]
    return out.reshape(u.shape)


def clip_modalities(z_img, z_ctx, c_img: float, c_ctx: float) -> np.ndarray:
    """Clip each block to its bound and concatenate as ``[image | context]``."""
    a = clip_block(z_img, c_img)
    b = clip_block(z_ctx, c_ctx)
    return np.concatenate([a, b], axis=-1)


def allocate_budget(q, budget: PrivacyBudget, D: int | None = None) -> NoiseSchedule:
    q = np.asarray(q, dtype=np.float64)
    D = q.size if D is None else D
    if q.size != D:
        raise ValueError(f"importance prior has {q.size} entries, expected D={D}")
    if np.any(q < 0):
        raise ValueError("importance prior must be nonnegative")
    weights = (q + budget.eta) ** budget.beta
    eps = budget.epsilon * weights / weights.sum()
    delta = np.full(D, budget.delta / D)
    return NoiseSchedule(eps, delta, gaussian_sigma(eps, delta, budget.c_tot))


def uniform_schedule(budget: PrivacyBudget, D: int) -> NoiseSchedule:
    return allocate_budget(np.zeros(D), PrivacyBudget(budget.epsilon, budget.delta, 0.0,
                                                     budget.eta, budget.c_img, budget.c_ctx))


@dataclass
class ReleaseRegistry:
    """Tracks released record ids so each is released at most once."""

    released: set = field(default_factory=set)

    def claim(self, record_id) -> None:
        if record_id in self.released:
            raise ReleaseError(f"record {record_id} was already released in this run")
        self.released.add(record_id)


def release(x_clipped: np.ndarray, schedule: NoiseSchedule | None, rng: RngHandle, record_id,
            registry: ReleaseRegistry | None = None) -> np.ndarray:
    """Single-shot release of one clipped fused vector.

    Noise for record ``record_id`` comes from its own child stream of ``rng``.
    ``schedule=None`` releases the clipped vector unchanged (non-private mode).
    """
    x = np.asarray(x_clipped, dtype=np.float64)
    if registry is not None:
        registry.claim(record_id)
    if schedule is None:
        return x.copy()
    if schedule.D != x.size:
        raise ValueError(f"schedule dimension {schedule.D} != feature dimension {x.size}")
    gen = rng.child(record_id).generator()
    return x + schedule.sigma * box_muller(gen, x.size)


@dataclass
class PrivatizedTable:
    """Released features for every record; the only thing downstream stages see."""

    ids: np.ndarray
    features: np.ndarray
    split: np.ndarray  # 0 train, 1 val, 2 test
    epsilon: float | None
    delta: float | None

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(f"#privatized\teps={self.epsilon}\tdelta={self.delta}\tD={self.features.shape[1]}\n")
            for i, s, row in zip(self.ids, self.split, self.features):
                fh.write("\t".join([str(int(i)), str(int(s))] + [repr(float(v)) for v in row]) + "\n")


def privatize_dataset(splits: Sequence[Sequence], encoder, schedule: NoiseSchedule | None,
                      clip_bounds: tuple[float, float], rng: RngHandle,
                      budget: PrivacyBudget | None = None) -> PrivatizedTable:
    """Encode, clip and release every record of every split under one schedule."""
    registry = ReleaseRegistry()
    ids, feats, tags = [], [], []
    c_img, c_ctx = clip_bounds
    for tag, records in enumerate(splits):
        if not records:
            continue
        z_img, z_ctx = encoder.encode_records(records)
        x_tilde = clip_modalities(z_img, z_ctx, c_img, c_ctx)
        for rec, row in zip(records, x_tilde):
            feats.append(release(row, schedule, rng, rec.id, registry))
            ids.append(rec.id)
            tags.append(tag)
    private = schedule is not None
    return PrivatizedTable(np.array(ids), np.array(feats), np.array(tags),
                           budget.epsilon if private and budget else None,
                           budget.delta if private and budget else None)
