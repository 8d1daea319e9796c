"""Synthetic melt-pool dataset generator and the line-delimited dataset format.

File layout (tab-separated, one record per line after the header)::

    #porogat-dataset	v1	H=32	W=32	ds=6
    id  layer  y  z  label  s_1 .. s_ds  p_1 .. p_HW

The patch is flattened row-major. Numbers are written with ``repr`` so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Record, RngHandle

FORMAT_TAG = "#porogat-dataset"
FORMAT_VERSION = "v1"
STATE_NAMES = ("peak", "mean", "hot_area", "eccentricity", "offset_y", "offset_z")


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the line and field."""


@dataclass(frozen=True)
class SynthParams:
    n_records: int = 1564
    porous_rate: float = 0.0447
    n_layers: int = 17
    tracks_per_layer: int = 4
    patch_size: int = 32
    peak_range: tuple[float, float] = (1000.0, 2500.0)
    heat_accumulation: float = 25.0  # degC per layer
    cluster_radius: float = 1.5  # mm
    wall_length: float = 25.4  # mm
    track_pitch: float = 0.25  # mm
    peak_effect: float = 120.0  # degC peak depression per unit defect severity
    label_noise: float = 0.35  # logistic scale of the unobserved label term
    defect_amplitude: tuple[float, float] = (0.9, 1.5)  # severity added at defect sites
    cluster_strength: float = 6.0  # how strongly defect sites follow the smooth field
    seed: int = 2024

    def validate(self) -> None:
        if not 0 < self.porous_rate < 1:
            raise ValueError("porous_rate must lie in (0, 1)")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.n_records < 1 or self.tracks_per_layer < 1 or self.patch_size < 4:
            raise ValueError("n_records, tracks_per_layer and patch_size must be positive")
        if self.porous_rate * self.n_records < 3:
            raise ValueError(
                f"porous_rate * n_records = {self.porous_rate * self.n_records:.2f} < 3; "
                "too few porous records to split")
        lo, hi = self.peak_range
        if not lo < hi:
            raise ValueError("peak_range must be increasing")


def _lattice(p: SynthParams):
    per_layer = math.ceil(p.n_records / p.n_layers)
    per_track = math.ceil(per_layer / p.tracks_per_layer)
    dy = p.wall_length / per_track
    layers, ys, zs = [], [], []
    for layer in range(p.n_layers):
        for t in range(p.tracks_per_layer):
            for s in range(per_track):
                layers.append(layer)
                # serpentine toolpath: odd tracks scan backwards
                pos = s if t % 2 == 0 else per_track - 1 - s
                ys.append((pos + 0.5) * dy)
                zs.append(t * p.track_pitch)
    n = p.n_records
    return np.array(layers[:n]), np.array(ys[:n]), np.array(zs[:n])


def _render(peak, ambient, s_major, ecc, angle, cy, cx, size):
    # vectorised 2-D gaussian blobs, one per record
    r = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    dy = yy[None] - cy[:, None, None]
    dx = xx[None] - cx[:, None, None]
    c, s = np.cos(angle)[:, None, None], np.sin(angle)[:, None, None]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    s_minor = s_major * (1.0 - ecc)
    q = (u / s_major[:, None, None]) ** 2 + (v / s_minor[:, None, None]) ** 2
    amp = (peak - ambient)[:, None, None]
    return ambient[:, None, None] + amp * np.exp(-0.5 * q)


def generate_synthetic(params: SynthParams | None = None) -> list[Record]:
    """Generate a layered thin-wall dataset with clustered porosity.

    A smooth latent defect-severity field per layer drives depressed,
    elongated melt pools; labels come from a logistic score on the peak
    anomaly, eccentricity and the number of severe in-layer neighbours,
    thresholded at the quantile that yields ``round(porous_rate * n)``
    porous records.
    """
    p = params or SynthParams()
    p.validate()
    gen = RngHandle(p.seed, "synth").generator()
    n, size = p.n_records, p.patch_size
    layer, y, z = _lattice(p)
    lo, hi = p.peak_range

    # latent severity: a smooth field of gaussian bumps per layer, plus discrete
    # defect sites drawn preferentially where the field is high
    field = np.zeros(n)
    for ell in range(p.n_layers):
        idx = np.flatnonzero(layer == ell)
        if idx.size == 0:
            continue
        for _ in range(1 + gen.poisson(1.5)):
            cy = gen.uniform(0, p.wall_length)
            cz = gen.uniform(0, (p.tracks_per_layer - 1) * p.track_pitch + 1e-9)
            d2 = (y[idx] - cy) ** 2 + (z[idx] - cz) ** 2
            field[idx] += gen.uniform(0.8, 1.6) * np.exp(-0.5 * d2 / p.cluster_radius ** 2)
    n_pos = int(round(p.porous_rate * n))
    w = np.exp(p.cluster_strength * field)
    defect = np.zeros(n)
    defect[gen.choice(n, n_pos, replace=False, p=w / w.sum())] = 1.0
    severity = (0.35 * field + defect * gen.uniform(*p.defect_amplitude, n)
                + 0.25 * gen.standard_normal(n))

    base_peak = lo + 0.62 * (hi - lo) + p.heat_accumulation * layer
    peak = base_peak - p.peak_effect * severity + 70.0 * gen.standard_normal(n)
    ambient = lo + 0.5 * p.heat_accumulation * layer + 20.0 * gen.random(n)
    peak = np.clip(peak, ambient + 150.0, hi - 1.0)
    ecc = np.clip(0.12 + 0.18 * severity + 0.06 * gen.standard_normal(n), 0.0, 0.8)
    s_major = size * (0.16 + 0.015 * gen.standard_normal(n))
    angle = gen.uniform(-0.4, 0.4, n)
    cy = 0.8 * gen.standard_normal(n)
    cx = 0.8 * gen.standard_normal(n)
    patches = _render(peak, ambient, s_major, ecc, angle, cy, cx, size)
    patches += 6.0 * gen.standard_normal(patches.shape)
    patches = np.round(np.clip(patches, lo, hi), 2)

    # neighbour term: severe melt pools within the clustering radius
    severe = severity > np.quantile(severity, 0.85)
    neigh = np.zeros(n)
    for ell in range(p.n_layers):
        idx = np.flatnonzero(layer == ell)
        d = np.hypot(y[idx, None] - y[None, idx], z[idx, None] - z[None, idx])
        close = (d <= p.cluster_radius) & ~np.eye(idx.size, dtype=bool)
        neigh[idx] = close @ severe[idx]

    peak_anom = (peak - base_peak) / p.peak_effect
    score = (-1.6 * peak_anom + 6.0 * (ecc - 0.12) + 0.25 * neigh
             + p.label_noise * gen.logistic(size=n))
    labels = np.zeros(n, dtype=int)
    labels[np.argsort(-score, kind="stable")[:n_pos]] = 1

    states = np.stack(_state_features(patches, gen), axis=1)
    return [
        Record(id=i, patch=patches[i], state=states[i], layer=int(layer[i]),
               coords=(float(y[i]), float(z[i])), label=int(labels[i]))
        for i in range(n)
    ]


def _state_features(patches, gen):
    # sensor-derived scalar summaries with measurement noise
    n, h, w = patches.shape
    flat = patches.reshape(n, -1)
    peak = flat.max(1)
    mean = flat.mean(1)
    hot = (flat > 1500.0).mean(1)
    r = np.arange(h) - (h - 1) / 2.0
    c = np.arange(w) - (w - 1) / 2.0
    wts = patches - patches.min(axis=(1, 2), keepdims=True)
    tot = wts.sum(axis=(1, 2)) + 1e-12
    oy = (wts.sum(2) * r).sum(1) / tot
    oz = (wts.sum(1) * c).sum(1) / tot
    vy = (wts.sum(2) * r ** 2).sum(1) / tot - oy ** 2
    vz = (wts.sum(1) * c ** 2).sum(1) / tot - oz ** 2
    ecc = np.abs(vy - vz) / (vy + vz + 1e-12)
    noise = lambda scale: scale * gen.standard_normal(n)
    return [np.round(a, 4) for a in (peak + noise(15.0), mean + noise(5.0), hot + noise(0.01),
                                     ecc + noise(0.03), oy + noise(0.3), oz + noise(0.3))]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(records: Sequence[Record], path: str | Path) -> None:
    if not records:
        raise ValueError("no records to write")
    h, w = records[0].patch.shape
    ds = records[0].state.size
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"{FORMAT_TAG}\t{FORMAT_VERSION}\tH={h}\tW={w}\tds={ds}\n")
        for r in records:
            if r.patch.shape != (h, w) or r.state.size != ds:
                raise ValueError(f"record {r.id}: dimensions differ from the first record")
            fields = [str(r.id), str(r.layer), _fmt(r.coords[0]), _fmt(r.coords[1]), str(r.label)]
            fields += [_fmt(v) for v in r.state]
            fields += [_fmt(v) for v in r.patch.ravel()]
            fh.write("\t".join(fields) + "\n")


def _parse_header(line: str):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5 or parts[0] != FORMAT_TAG:
        raise DatasetFormatError(f"line 1: expected header '{FORMAT_TAG}\\t{FORMAT_VERSION}\\tH=..\\tW=..\\tds=..'")
    if parts[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported format version {parts[1]!r}")
    dims = {}
    for token in parts[2:]:
        key, _, val = token.partition("=")
        try:
            dims[key] = int(val)
        except ValueError:
            raise DatasetFormatError(f"line 1: bad dimension field {token!r}") from None
    if set(dims) != {"H", "W", "ds"}:
        raise DatasetFormatError("line 1: header must give H, W and ds")
    return dims["H"], dims["W"], dims["ds"]


def _field_name(pos: int, ds: int) -> str:
    base = ("id", "layer", "y", "z", "label")
    if pos < 5:
        return base[pos]
    if pos < 5 + ds:
        return f"state[{pos - 5}]"
    return f"patch[{pos - 5 - ds}]"


def read_dataset(path: str | Path) -> list[Record]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        if not header:
            raise DatasetFormatError("line 1: empty file, missing header")
        h, w, ds = _parse_header(header)
        n_fields = 5 + ds + h * w
        records = []
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise DatasetFormatError(
                    f"line {lineno}: expected {n_fields} fields (H={h}, W={w}, ds={ds}), "
                    f"got {len(parts)}; field {_field_name(min(len(parts), n_fields - 1), ds)} "
                    "is missing or extra")
            values = []
            for pos, tok in enumerate(parts):
                try:
                    values.append(int(tok) if pos in (0, 1, 4) else float(tok))
                except ValueError:
                    raise DatasetFormatError(
                        f"line {lineno}: field {_field_name(pos, ds)}: cannot parse {tok!r}") from None
            try:
                rec = Record(id=values[0], layer=values[1], coords=(values[2], values[3]),
                             label=values[4], state=np.array(values[5:5 + ds]),
                             patch=np.array(values[5 + ds:]).reshape(h, w))
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from None
            records.append(rec)
    if not records:
        raise DatasetFormatError(f"{path}: no records")
    return records
