"""Porous-targeted augmentation operators.

Only minority-class training records are ever augmented. Each operator
returns a new patch clipped to the valid sensor range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Record, RngHandle, box_muller

OPERATORS = ("a1", "a2", "a3", "a4")


@dataclass(frozen=True)
class AugmentPolicy:
    probs: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    noise_var: tuple[float, float] = (4.0, 64.0)  # degC^2
    scale: tuple[float, float] = (0.9, 1.1)
    theta_max: float = 10.0  # degrees
    shift_max: int = 2  # pixels
    lam: tuple[float, float] = (0.3, 0.7)
    intensity: tuple[float, float] = (1000.0, 2500.0)

    def __post_init__(self):
        if any(p < 0 for p in self.probs) or sum(self.probs) > 1 + 1e-12:
            raise ValueError("operator probabilities must be nonnegative and sum to <= 1")
        for name in ("noise_var", "scale", "lam", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")
        if self.noise_var[0] < 0 or self.scale[0] <= 0:
            raise ValueError("noise variance must be >= 0 and scale > 0")
        if not (0 <= self.lam[0] and self.lam[1] <= 1):
            raise ValueError("lambda range must lie in [0, 1]")
        if self.theta_max < 0 or self.shift_max < 0:
            raise ValueError("rigid-motion bounds must be nonnegative")


def _clip(patch, policy):
    lo, hi = policy.intensity
    return np.clip(patch, lo, hi)


def a1_gaussian_noise(patch, variance: float, rng: np.random.Generator,
                      policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    patch = np.asarray(patch, dtype=np.float64)
    if variance == 0:
        return _clip(patch, policy)
    eta = math.sqrt(variance) * box_muller(rng, patch.size).reshape(patch.shape)
    return _clip(patch + eta, policy)


def a2_brightness(patch, scale: float, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return _clip(scale * np.asarray(patch, dtype=np.float64), policy)


def _bilinear_rotate(patch, theta_deg, fill):
    h, w = patch.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    # inverse map: output pixel -> source coordinate (counter-clockwise rotation)
    dy, dx = rr - cy, cc - cx
    sy = cy + c * dy + s * dx
    sx = cx - s * dy + c * dx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(patch)
    weight = np.zeros_like(patch)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.where(ok, patch[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
        out += wgt * vals
        weight += wgt
    return out / weight


def a3_rigid(patch, theta: float, du: int, dv: int,
             policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Rotate by ``theta`` degrees about the centre, then shift by (du, dv) pixels.

    ``du`` moves columns, ``dv`` rows. Uncovered pixels take the patch minimum.
    """
    if abs(theta) > policy.theta_max + 1e-12:
        raise ValueError(f"|theta|={abs(theta)} exceeds theta_max={policy.theta_max}")
    if max(abs(du), abs(dv)) > policy.shift_max + 1e-12:
        raise ValueError(f"shift ({du}, {dv}) exceeds shift_max={policy.shift_max}")
    patch = np.asarray(patch, dtype=np.float64)
    fill = patch.min()
    out = patch.copy() if theta == 0 else _bilinear_rotate(patch, theta, fill)
    du, dv = int(round(du)), int(round(dv))
    if du or dv:
        h, w = patch.shape
        shifted = np.full_like(out, fill)
        src_r = slice(max(0, -dv), h - max(0, dv))
        dst_r = slice(max(0, dv), h - max(0, -dv))
        src_c = slice(max(0, -du), w - max(0, du))
        dst_c = slice(max(0, du), w - max(0, -du))
        shifted[dst_r, dst_c] = out[src_r, src_c]
        out = shifted
    return _clip(out, policy)


def a4_interpolate(rec_i: Record, rec_j: Record, lam: float,
                   policy: AugmentPolicy = AugmentPolicy()):
    """Convex mix of two porous records; returns ``(patch, state)``."""
    if rec_i.label != 1 or rec_j.label != 1:
        raise ValueError("a4 requires both records to be porous (sampled from the porous set)")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1:
        return _clip(rec_i.patch, policy), rec_i.state.copy()
    patch = _clip(lam * rec_i.patch + (1 - lam) * rec_j.patch, policy)
    state = lam * rec_i.state + (1 - lam) * rec_j.state
    return patch, state


def _augment_one(src: Record, porous: Sequence[Record], new_id: int, policy, gen):
    op = gen.choice(5, p=list(policy.probs) + [max(0.0, 1 - sum(policy.probs))])
    if op == 0:
        var = gen.uniform(*policy.noise_var)
        patch, state = a1_gaussian_noise(src.patch, var, gen, policy), src.state
    elif op == 1:
        patch, state = a2_brightness(src.patch, gen.uniform(*policy.scale), policy), src.state
    elif op == 2:
        theta = gen.uniform(-policy.theta_max, policy.theta_max)
        du, dv = gen.integers(-policy.shift_max, policy.shift_max + 1, size=2)
        patch, state = a3_rigid(src.patch, theta, int(du), int(dv), policy), src.state
    elif op == 3:
        partner = porous[gen.integers(len(porous))]
        patch, state = a4_interpolate(src, partner, gen.uniform(*policy.lam), policy)
    else:
        patch, state = src.patch, src.state
    return Record(id=new_id, patch=patch, state=state, layer=src.layer,
                  coords=src.coords, label=1)


def n_to_append(n_porous: int, n_total: int, target_ratio: float) -> int:
    """Porous copies needed so that porous / total reaches ``target_ratio``."""
    if not 0 <= target_ratio < 1:
        raise ValueError("target_ratio must lie in [0, 1)")
    need = (target_ratio * n_total - n_porous) / (1 - target_ratio)
    return max(0, int(round(need)))


def augment_training_set(train: Sequence[Record], policy: AugmentPolicy, target_ratio: float,
                         rng: RngHandle) -> list[Record]:
    """Append augmented porous copies until porous:total reaches ``target_ratio``.

    Sources cycle through the porous records; each copy gets its own RNG
    stream keyed by its index, so results do not depend on call order.
    New ids start above the largest existing id.
    """
    porous = [r for r in train if r.label == 1]
    if len(porous) < 2:
        raise ValueError(f"need at least 2 porous training records, got {len(porous)}")
    n_new = n_to_append(len(porous), len(train), target_ratio)
    next_id = max(r.id for r in train) + 1
    out = list(train)
    for k in range(n_new):
        gen = rng.child("aug", k).generator()
        src = porous[k % len(porous)]
        out.append(_augment_one(src, porous, next_id + k, policy, gen))
    return out
