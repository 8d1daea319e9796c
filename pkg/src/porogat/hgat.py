"""Graph attention model with an edge-prior slot in the attention logits.

Per head and layer::

    e_ij  = LReLU(a . [W h_i | W h_j | w_ij]) / T_att
    a_ij  = softmax_j(e_ij) over N(i) (self-loop included, w_ii = 1)
    h_i'  = elu(sum_j a_ij W h_j)

Heads are concatenated on hidden layers and averaged on the last one; a
dense classifier maps the final representation to two logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import nnkit
from .core import RngHandle
from .graph import StratifiedGraph
from .metrics import auc, f1_threshold_scan

LRELU_SLOPE = 0.2


class TrainingError(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class EdgeIndex:
    """kNN edges plus one self-loop per node, sorted by target node."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray
    starts: np.ndarray

    @classmethod
    def from_graph(cls, graph: StratifiedGraph | None, n: int | None = None) -> "EdgeIndex":
        n = graph.n_nodes if graph is not None else n
        loops = np.arange(n)
        if graph is None:
            src, dst, w = loops, loops, np.ones(n)
        else:
            src = np.concatenate([graph.src, loops])
            dst = np.concatenate([graph.dst, loops])
            w = np.concatenate([graph.weight, np.ones(n)])
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        starts = np.searchsorted(src, np.arange(n))
        return cls(n, src, dst, w, starts)

    @classmethod
    def from_lists(cls, n: int, src, dst, w) -> "EdgeIndex":
        src, dst, w = (np.asarray(a) for a in (src, dst, w))
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], np.asarray(w, dtype=float)[order]
        if np.any(np.bincount(src, minlength=n) == 0):
            raise ValueError("every node needs at least one incoming neighbour entry")
        return cls(n, src, dst, w, np.searchsorted(src, np.arange(n)))

    def segment_sum(self, x: np.ndarray) -> np.ndarray:
        return np.add.reduceat(x, self.starts, axis=0)

    def segment_softmax(self, s: np.ndarray) -> np.ndarray:
        mx = np.maximum.reduceat(s, self.starts, axis=0)
        e = np.exp(s - mx[self.src])
        return e / self.segment_sum(e)[self.src]

    def csr(self, values: np.ndarray) -> sp.csr_matrix:
        """Row ``i`` holds ``values`` on the edges leaving ``i``."""
        indptr = np.r_[self.starts, self.src.size]
        return sp.csr_matrix((values, self.dst, indptr), shape=(self.n, self.n))


@dataclass
class HgatConfig:
    in_dim: int
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    dropout: float = 0.2
    temperature: float = 0.1
    edge_prior: bool = True


@dataclass
class HgatModel:
    """Parameters per GAT layer ``g``: ``l{g}.W`` stacks all heads as
    (heads * hidden, in); row ``h`` of ``l{g}.a`` is head ``h``'s attention
    vector ``[a_src | a_dst | a_prior]`` (no prior slot when disabled)."""

    cfg: HgatConfig
    store: nnkit.ParamStore = field(default_factory=nnkit.ParamStore)
    feat_mean: np.ndarray | None = None
    feat_scale: np.ndarray | None = None

    @classmethod
    def init(cls, cfg: HgatConfig, rng: RngHandle) -> "HgatModel":
        gen = rng.child("hgat-init").generator()
        m = cls(cfg)
        a_len = 2 * cfg.hidden + (1 if cfg.edge_prior else 0)
        in_dim = cfg.in_dim
        for g in range(cfg.layers):
            m.store.add(f"l{g}.W", np.concatenate(
                [nnkit.glorot(cfg.hidden, in_dim, gen) for _ in range(cfg.heads)]))
            m.store.add(f"l{g}.a", np.stack([nnkit.glorot(1, a_len, gen)[0] for _ in range(cfg.heads)]))
            in_dim = cfg.hidden * cfg.heads
        m.store.add("cls.W", nnkit.glorot(2, cfg.hidden, gen))
        m.store.add("cls.b", np.zeros(2))
        return m

    def standardize(self, X: np.ndarray) -> np.ndarray:
        if self.feat_mean is None:
            return X
        return (X - self.feat_mean) / self.feat_scale

    # -- forward / backward --------------------------------------------------
    def forward(self, X: np.ndarray, edges: EdgeIndex, gen: np.random.Generator | None = None):
        """Returns ``(logits, cache)``; ``gen`` enables dropout (training)."""
        cfg = self.cfg
        if X.ndim != 2 or X.shape[1] != cfg.in_dim:
            raise ValueError(f"features have shape {X.shape}, model expects {cfg.in_dim} columns")
        cache = {"layers": []}
        h_in = X
        for g in range(cfg.layers):
            last = g == cfg.layers - 1
            x_drop, mask = nnkit.dropout(h_in, cfg.dropout, gen)
            lc = self._layer_forward(x_drop, g, edges)
            out = lc["out"]  # (N, heads, hidden)
            pre = out.mean(axis=1) if last else out.reshape(out.shape[0], -1)
            lc.update(x=x_drop, mask=mask, pre=pre)
            cache["layers"].append(lc)
            h_in = nnkit.elu(pre)
        logits = nnkit.dense_forward(h_in, self.store["cls.W"], self.store["cls.b"])
        cache["final"] = h_in
        return logits, cache

    def _layer_forward(self, x, g, edges: EdgeIndex):
        cfg = self.cfg
        hid, nh = cfg.hidden, cfg.heads
        a, W = self.store[f"l{g}.a"], self.store[f"l{g}.W"]
        Hs = [x @ W[h * hid:(h + 1) * hid].T for h in range(nh)]
        f_src = np.stack([Hs[h] @ a[h, :hid] for h in range(nh)], axis=1)
        f_dst = np.stack([Hs[h] @ a[h, hid:2 * hid] for h in range(nh)], axis=1)
        pre = f_src[edges.src] + f_dst[edges.dst]
        if cfg.edge_prior:
            pre = pre + edges.w[:, None] * a[:, 2 * hid]
        e = nnkit.leaky_relu(pre, LRELU_SLOPE)
        att = edges.segment_softmax(e / cfg.temperature)  # (E, heads)
        mats = [edges.csr(att[:, h]) for h in range(nh)]
        out = np.stack([mats[h] @ Hs[h] for h in range(nh)], axis=1)
        return {"H": Hs, "pre_e": pre, "att": att, "mats": mats, "out": out}

    def backward(self, dlogits: np.ndarray, cache, edges: EdgeIndex) -> dict[str, np.ndarray]:
        cfg, s = self.cfg, self.store
        grads = {}
        dh, grads["cls.W"], grads["cls.b"] = nnkit.dense_backward(dlogits, cache["final"], s["cls.W"])
        for g in reversed(range(cfg.layers)):
            lc = cache["layers"][g]
            last = g == cfg.layers - 1
            dpre = dh * nnkit.elu_grad(lc["pre"])
            n = dpre.shape[0]
            if last:
                dout = np.repeat(dpre[:, None, :] / cfg.heads, cfg.heads, axis=1)
            else:
                dout = dpre.reshape(n, cfg.heads, cfg.hidden)
            dW, da, dx = self._layer_backward(dout, lc, g, edges, need_dx=g > 0)
            grads[f"l{g}.W"], grads[f"l{g}.a"] = dW, da
            if dx is None:
                break
            if lc["mask"] is not None:
                dx = dx * lc["mask"]
            dh = dx
        return grads

    def _layer_backward(self, dout, lc, g, edges: EdgeIndex, need_dx: bool = True):
        cfg = self.cfg
        hid, nh = cfg.hidden, cfg.heads
        W, a = self.store[f"l{g}.W"], self.store[f"l{g}.a"]
        Hs, att, mats, x = lc["H"], lc["att"], lc["mats"], lc["x"]
        douts = [np.ascontiguousarray(dout[:, h, :]) for h in range(nh)]
        # only sources with a nonzero upstream gradient touch the attention terms
        live = np.any(dout != 0, axis=(1, 2))
        sel = np.flatnonzero(live[edges.src])
        e_src, e_dst = edges.src[sel], edges.dst[sel]
        att_s = att[sel]
        datt = np.stack([np.einsum("ek,ek->e", douts[h][e_src], Hs[h][e_dst]) for h in range(nh)],
                        axis=1).reshape(sel.size, nh)
        dpre = np.zeros_like(att)
        if sel.size:
            seg = np.r_[0, np.flatnonzero(np.diff(e_src)) + 1]
            inner = np.add.reduceat(att_s * datt, seg, axis=0)
            ds = att_s * (datt - np.repeat(inner, np.diff(np.r_[seg, sel.size]), axis=0))
            dpre[sel] = ds / cfg.temperature * nnkit.leaky_relu_grad(lc["pre_e"][sel], LRELU_SLOPE)
        df_src = edges.segment_sum(dpre)  # (N, heads)
        da = np.zeros_like(a)
        dW = np.empty_like(W)
        dx = np.zeros_like(x) if need_dx else None
        # rows of dH that can be nonzero: live sources and their neighbours
        rows_mask = live.copy()
        rows_mask[e_dst] = True
        rows = np.flatnonzero(rows_mask)
        x_r = x[rows]
        for h in range(nh):
            df_dst = np.bincount(e_dst, weights=dpre[sel, h], minlength=edges.n)
            da[h, :hid] = df_src[:, h] @ Hs[h]
            da[h, hid:2 * hid] = df_dst @ Hs[h]
            dH = (mats[h].T @ douts[h])[rows]
            dH += np.outer(df_src[rows, h], a[h, :hid]) + np.outer(df_dst[rows], a[h, hid:2 * hid])
            dW[h * hid:(h + 1) * hid] = dH.T @ x_r
            if need_dx:
                dx[rows] += dH @ W[h * hid:(h + 1) * hid]
        if cfg.edge_prior:
            da[:, 2 * hid] = edges.w @ dpre
        return dW, da, dx

    # -- inference -------------------------------------------------------------
    def attention(self, X: np.ndarray, edges: EdgeIndex):
        """Per-layer (E, heads) attention coefficients on standardised inputs, no dropout."""
        _, cache = self.forward(X, edges, None)
        return [lc["att"] for lc in cache["layers"]]

    def predict_proba(self, X: np.ndarray, edges: EdgeIndex) -> np.ndarray:
        logits, _ = self.forward(self.standardize(X), edges, None)
        return nnkit.softmax_rows(logits)[:, 1]


def loss_and_grads(model: HgatModel, X, edges, labels, nodes, focal: nnkit.FocalLossParams,
                   gen=None):
    """Focal loss over ``nodes`` (may repeat) with a full-graph forward pass."""
    logits, cache = model.forward(X, edges, gen)
    loss, dsub = nnkit.focal_loss(logits[nodes], labels[nodes], focal)
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, nodes, dsub)
    return loss, model.backward(dlogits, cache, edges)


@dataclass(frozen=True)
class TunedThreshold:
    t_star: float
    val_f1: float


def tune_threshold(scores, labels) -> TunedThreshold:
    t, f1 = f1_threshold_scan(scores, labels)
    return TunedThreshold(t, f1)


@dataclass
class TrainResult:
    model: HgatModel
    threshold: TunedThreshold
    history: list = field(default_factory=list)


def train(graph: StratifiedGraph | None, features: np.ndarray, labels: np.ndarray,
          train_idx: Sequence[int], val_idx: Sequence[int], cfg: HgatConfig, *,
          lr: float = 1e-3, weight_decay: float = 1e-4, batch_size: int = 64, epochs: int = 25,
          focal_gamma: float = 2.0, balance: bool = True, minority_target: float = 0.5,
          rng: RngHandle = RngHandle(0, "hgat")) -> TrainResult:
    """Full-graph forward, node-batched focal loss, Adam; then tune t* on validation.

    With ``balance`` the sampler draws training nodes so the expected porous
    share per batch is ``minority_target``; without it sampling is uniform.
    Class weights are the normalised inverse class frequencies of the sampled
    stream either way.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    train_idx = np.asarray(train_idx)
    val_idx = np.asarray(val_idx)
    edges = EdgeIndex.from_graph(graph, features.shape[0])
    model = HgatModel.init(cfg, rng)
    mu = features[train_idx].mean(axis=0)
    sd = features[train_idx].std(axis=0)
    model.feat_mean, model.feat_scale = mu, np.where(sd > 0, sd, 1.0)
    X = model.standardize(features)

    y_tr = labels[train_idx]
    if not 0 < y_tr.sum() < y_tr.size:
        raise ValueError("the training split needs both classes")
    if balance:
        target = minority_target if y_tr.mean() <= 0.5 else 1 - minority_target
        stream = np.array([1 - target, target])
    else:
        stream = np.bincount(y_tr, minlength=2) / y_tr.size
    weights = tuple(float(w) for w in (1 / stream) * 2 / (1 / stream).sum())
    sampler = nnkit.weighted_sampler(y_tr, minority_target if balance else None, batch_size,
                                     rng.child("sampler").generator())
    focal = nnkit.FocalLossParams(focal_gamma, weights)
    drop_gen = rng.child("dropout").generator()
    steps = max(1, int(np.ceil(train_idx.size / batch_size)))
    history = []
    last_good = model.store.copy_params()
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            nodes = train_idx[next(sampler)]
            loss, grads = loss_and_grads(model, X, edges, labels, nodes, focal, drop_gen)
            if not np.isfinite(loss):
                model.store.load_params(last_good)
                raise TrainingError(f"non-finite loss at epoch {epoch}", last_good)
            model.store.set_grads(grads)
            nnkit.adam_step(model.store, lr, weight_decay)
            total += loss
        last_good = model.store.copy_params()
        entry = {"epoch": epoch, "loss": total / steps}
        yv = labels[val_idx]
        if 0 < yv.sum() < yv.size:
            logits, _ = model.forward(X, edges, None)
            entry["val_auc"] = auc(nnkit.softmax_rows(logits)[val_idx, 1], yv)
        history.append(entry)
    scores = model.predict_proba(features, edges)
    return TrainResult(model, tune_threshold(scores[val_idx], labels[val_idx]), history)


def predict(model: HgatModel, graph: StratifiedGraph | None, features: np.ndarray, t_star: float):
    """Scores and hard labels ``score > t_star`` (dropout off)."""
    edges = EdgeIndex.from_graph(graph, np.asarray(features).shape[0])
    scores = model.predict_proba(np.asarray(features, dtype=np.float64), edges)
    return scores, (scores > t_star).astype(int)


@dataclass
class SelfCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    per_param: dict


def gradient_selfcheck(model: HgatModel, X: np.ndarray, edges: EdgeIndex, labels: np.ndarray,
                       focal: nnkit.FocalLossParams = nnkit.FocalLossParams(),
                       tolerance: float = 1e-4, backward_hook=None) -> SelfCheckReport:
    """Finite-difference check of every HGAT parameter on a tiny instance.

    ``backward_hook`` may rewrite the analytic gradients (negative controls).
    """
    nodes = np.arange(X.shape[0])
    _, grads = loss_and_grads(model, X, edges, labels, nodes, focal)
    if backward_hook is not None:
        grads = backward_hook(copy.deepcopy(grads))

    def f():
        logits, _ = model.forward(X, edges, None)
        return nnkit.focal_loss(logits, labels, focal)[0]

    rep = nnkit.grad_check(f, model.store.params, grads, tolerance)
    return SelfCheckReport(rep.passed, rep.max_rel_error, rep.worst_param, rep.per_param)
