"""Shared domain types, run configuration and the seeded RNG contract."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

PRIVACY_MODES = ("none", "uniform", "fi")


class ConfigError(ValueError):
    """Raised for invalid configuration values or files."""


@dataclass(frozen=True, eq=False)
class Record:
    """One melt-pool observation.

    ``patch`` is an (H, W) temperature grid in degrees C, ``state`` the
    process-state descriptors, ``coords`` the in-layer (y, z) position in mm.
    """

    id: int
    patch: np.ndarray
    state: np.ndarray
    layer: int
    coords: tuple[float, float]
    label: int

    def __post_init__(self):
        patch = np.asarray(self.patch, dtype=np.float64)
        state = np.asarray(self.state, dtype=np.float64).reshape(-1)
        if patch.ndim != 2:
            raise ValueError(f"record {self.id}: patch must be 2-D, got shape {patch.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"record {self.id}: label must be 0 or 1, got {self.label}")
        if self.layer < 0:
            raise ValueError(f"record {self.id}: layer must be >= 0, got {self.layer}")
        coords = (float(self.coords[0]), float(self.coords[1]))
        if not (np.all(np.isfinite(patch)) and np.all(np.isfinite(state))
                and all(math.isfinite(c) for c in coords)):
            raise ValueError(f"record {self.id}: non-finite values")
        patch.setflags(write=False)
        state.setflags(write=False)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "layer", int(self.layer))
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "id", int(self.id))

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (self.id == other.id and self.layer == other.layer
                and self.label == other.label and self.coords == other.coords
                and np.array_equal(self.patch, other.patch)
                and np.array_equal(self.state, other.state))

    __hash__ = None

    def replace(self, **changes) -> "Record":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one pipeline run.

    Defaults follow the reproducibility table where it gives a value; the
    remaining ones are desk-scale choices documented in the README.
    """

    # data / protocol
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_records: int = 1564
    porous_rate: float = 0.0447
    data_seed: int = 2024
    dataset_path: str = ""  # empty: generate the synthetic dataset
    # encoders
    d_img: int = 48
    d_ctx: int = 16
    warmup_epochs: int = 5
    warmup_lr: float = 1e-2
    label_smoothing: float = 0.1
    # graph
    k: int = 8
    alpha: float = 0.5
    tau: float = 1.0
    # privacy
    privacy_mode: str = "fi"
    epsilon: float = 2.0
    delta: float = 1e-5
    beta: float = 0.6
    eta: float = 0.01
    clip_quantile: float = 0.95
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 25
    dropout: float = 0.2
    attn_temperature: float = 0.1
    hidden: int = 64
    heads: int = 4
    gat_layers: int = 2
    focal_gamma: float = 2.0
    minority_target: float = 0.5
    augment_target_ratio: float = 0.5
    # flags
    edge_prior_enabled: bool = True
    oversampling_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    @property
    def D(self) -> int:
        return self.d_img + self.d_ctx

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def validate(self) -> None:
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fr}")
        for name in ("d_img", "d_ctx", "hidden", "heads", "gat_layers",
                     "batch_size", "k", "n_records"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not 0 < self.clip_quantile <= 1:
            raise ConfigError("clip_quantile must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.attn_temperature > 0:
            raise ConfigError("attn_temperature must be > 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not 0 < self.minority_target < 1:
            raise ConfigError("minority_target must lie in (0, 1)")
        if self.privacy_mode not in PRIVACY_MODES:
            raise ConfigError(f"privacy_mode must be one of {PRIVACY_MODES}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(s) for s in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw.strip("\"'")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, known[key], value)
    return dataclasses.replace(base, **changes)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RngHandle:
    """Named, seeded random stream.

    Handles with equal ``(seed, label)`` give identical sequences. Child
    streams keyed by record id make draws independent of iteration order.
    """

    seed: int
    label: str
    path: tuple = field(default=())

    def _entropy(self) -> int:
        key = "/".join([str(self.seed), self.label, *map(str, self.path)])
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=16).digest(), "little")

    def child(self, *keys) -> "RngHandle":
        return RngHandle(self.seed, self.label, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._entropy()))


def box_muller(gen: np.random.Generator, n: int) -> np.ndarray:
    """Standard normal draws via the Box-Muller transform of uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - gen.random(m)  # (0, 1]
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n]


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # floor counts, remainder goes to the largest split(s)
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(fractions)), key=lambda i: (-fractions[i], i))
    rem = n - sum(counts)
    for i in range(rem):
        counts[order[i % len(order)]] += 1
    return counts


def split_dataset(records: Sequence[Record], fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified train/val/test split.

    Each class is shuffled by a seed-derived key per record id and cut
    proportionally; leftover records from rounding go to the largest split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"invalid split fractions {fractions}")
    pos = [r for r in records if r.label == 1]
    neg = [r for r in records if r.label == 0]
    if len(pos) < 3:
        raise ValueError(f"cannot stratify: only {len(pos)} porous records (need >= 3)")
    if not neg:
        raise ValueError("cannot stratify: no non-porous records")
    rng = RngHandle(seed, "split")
    out = ([], [], [])
    for group in (pos, neg):
        keys = {r.id: rng.child(r.id).generator().random() for r in group}
        ordered = sorted(group, key=lambda r: (keys[r.id], r.id))
        start = 0
        for part, c in zip(out, _allocate(len(ordered), fractions)):
            part.extend(ordered[start:start + c])
            start += c
    return tuple(sorted(part, key=lambda r: r.id) for part in out)
