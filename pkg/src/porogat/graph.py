"""Layer-stratified hybrid kNN graph with heat-kernel edge affinities."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StratifiedGraph:
    """Directed kNN graph; edge ``src -> dst`` means ``dst`` is a neighbour of ``src``.

    Node indices are positions in the feature table, not record ids.
    """

    n_nodes: int
    layers: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    weight: np.ndarray
    k: int
    alpha: float
    tau: float

    @property
    def n_edges(self) -> int:
        return self.src.size

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes)

    def write(self, path: str | Path, ids=None) -> None:
        ids = np.arange(self.n_nodes) if ids is None else np.asarray(ids)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write("i\tj\tlayer\tD_ij\tw_ij\n")
            for s, d, dd, w in zip(self.src, self.dst, self.dist, self.weight):
                fh.write(f"{ids[s]}\t{ids[d]}\t{self.layers[s]}\t{float(dd)!r}\t{float(w)!r}\n")


def cosine_dissimilarity_matrix(Z: np.ndarray) -> np.ndarray:
    """``1 - cos(z_i, z_j)``; pairs involving a zero vector get 1."""
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = Z / safe[:, None]
    cos = U @ U.T
    cos = 0.5 * (cos + cos.T)
    np.clip(cos, -1.0, 1.0, out=cos)
    return 1.0 - cos


def hybrid_distance(p_i, p_j, z_i, z_j, alpha: float) -> float:
    """``alpha * ||p_i - p_j|| + (1 - alpha) * (1 - cos(z_i, z_j))``."""
    p_i, p_j = np.asarray(p_i, float), np.asarray(p_j, float)
    z_i, z_j = np.asarray(z_i, float), np.asarray(z_j, float)
    ni, nj = np.linalg.norm(z_i), np.linalg.norm(z_j)
    cos = 0.0 if ni == 0 or nj == 0 else float(np.clip(z_i @ z_j / (ni * nj), -1, 1))
    return alpha * float(np.hypot(*(p_i - p_j))) + (1 - alpha) * (1 - cos)


def hybrid_distance_matrix(coords: np.ndarray, Z: np.ndarray, alpha: float) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[1] != 2:
        raise ValueError(f"coords must be (n, 2), got {coords.shape}")
    spatial = np.hypot(coords[:, None, 0] - coords[None, :, 0], coords[:, None, 1] - coords[None, :, 1])
    return alpha * spatial + (1 - alpha) * cosine_dissimilarity_matrix(Z)


def build_graph(features: np.ndarray, coords: np.ndarray, layers: np.ndarray, k: int = 8,
                alpha: float = 0.5, tau: float = 1.0, d_img: int | None = None) -> StratifiedGraph:
    """Connect each node to its ``k`` nearest same-layer nodes.

    Only the first ``d_img`` feature columns (the image block) enter the
    cosine term. Ties at equal distance go to the lower node index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    features = np.asarray(features, dtype=np.float64)
    layers = np.asarray(layers)
    Z = features if d_img is None else features[:, :d_img]
    srcs, dsts, dists = [], [], []
    for ell in np.unique(layers):
        idx = np.flatnonzero(layers == ell)
        n = idx.size
        if n == 1:
            log.info("layer %s has a single node; it gets no edges", ell)
            continue
        Dm = hybrid_distance_matrix(coords[idx], Z[idx], alpha)
        m = min(k, n - 1)
        for a in range(n):
            row = Dm[a].copy()
            row[a] = np.inf
            # lexsort: last key is primary -> distance, then node index
            order = np.lexsort((idx, row))[:m]
            srcs.append(np.full(m, idx[a]))
            dsts.append(idx[order])
            dists.append(row[order])
    src = np.concatenate(srcs) if srcs else np.zeros(0, int)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, int)
    dist = np.concatenate(dists) if dists else np.zeros(0)
    return StratifiedGraph(features.shape[0], layers.copy(), src, dst, dist,
                           np.exp(-dist / tau), k, alpha, tau)
