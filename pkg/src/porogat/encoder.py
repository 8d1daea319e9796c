"""Image/context encoders, the supervised warmup head and the importance prior.

The image encoder is a desk-scale surrogate: a fixed vector of patch
statistics followed by one trainable dense layer with ELU. The context
encoder standardises (state, layer, y, z) and applies one dense layer with
ELU. Fused features are ``[image block | context block]`` in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnkit
from .core import Record, RngHandle

N_PATCH_STATS = 16
RADIAL_BINS = 4


def patch_statistics(patch: np.ndarray) -> np.ndarray:
    """Fixed 16-value summary of a thermal patch.

    Order: peak, mean, std, three area fractions above min + q*range for
    q in (0.25, 0.5, 0.75), centroid (row, col), second moments (rr, cc, rc),
    eccentricity proxy, four radial-ring means.
    """
    p = np.asarray(patch, dtype=np.float64)
    h, w = p.shape
    lo, hi = p.min(), p.max()
    span = hi - lo
    out = np.zeros(N_PATCH_STATS)
    out[0], out[1], out[2] = hi, p.mean(), p.std()
    if span > 0:
        for k, q in enumerate((0.25, 0.5, 0.75)):
            out[3 + k] = np.mean(p > lo + q * span)
    wts = p - lo
    tot = wts.sum()
    r = np.arange(h) - (h - 1) / 2.0
    c = np.arange(w) - (w - 1) / 2.0
    rr, cc = np.meshgrid(r, c, indexing="ij")
    if tot > 0:
        my = (wts * rr).sum() / tot
        mx = (wts * cc).sum() / tot
        vyy = (wts * (rr - my) ** 2).sum() / tot
        vxx = (wts * (cc - mx) ** 2).sum() / tot
        vxy = (wts * (rr - my) * (cc - mx)).sum() / tot
        tr = vyy + vxx
        disc = np.sqrt(max(((vyy - vxx) / 2) ** 2 + vxy ** 2, 0.0))
        lmax, lmin = tr / 2 + disc, tr / 2 - disc
        ecc = 1.0 - lmin / lmax if lmax > 0 else 0.0
        out[6:12] = my, mx, vyy, vxx, vxy, ecc
    rad = np.hypot(rr, cc)
    edges = np.linspace(0, rad.max() + 1e-9, RADIAL_BINS + 1)
    for k in range(RADIAL_BINS):
        ring = (rad >= edges[k]) & (rad < edges[k + 1])
        out[12 + k] = p[ring].mean()
    return out


def context_inputs(state, layer: int, coords) -> np.ndarray:
    return np.concatenate([np.asarray(state, dtype=np.float64), [float(layer)],
                           np.asarray(coords, dtype=np.float64)])


@dataclass
class Standardizer:
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def fit(self, X: np.ndarray) -> "Standardizer":
        X = np.atleast_2d(X)
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("standardizer is not fitted")
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


@dataclass
class Encoder:
    """Frozen-after-warmup image and context encoders plus the warmup head."""

    d_img: int
    d_ctx: int
    store: nnkit.ParamStore = field(default_factory=nnkit.ParamStore)
    img_std: Standardizer = field(default_factory=Standardizer)
    ctx_std: Standardizer = field(default_factory=Standardizer)
    patch_shape: tuple[int, int] | None = None

    @classmethod
    def init(cls, d_img: int, d_ctx: int, d_state: int, rng: RngHandle) -> "Encoder":
        gen = rng.child("encoder").generator()
        enc = cls(d_img, d_ctx)
        s = enc.store
        s.add("img.W", nnkit.glorot(d_img, N_PATCH_STATS, gen))
        s.add("img.b", np.zeros(d_img))
        s.add("ctx.W", nnkit.glorot(d_ctx, d_state + 3, gen))
        s.add("ctx.b", np.zeros(d_ctx))
        s.add("head.W", nnkit.glorot(2, d_img + d_ctx, gen))
        s.add("head.b", np.zeros(2))
        return enc

    @property
    def D(self) -> int:
        return self.d_img + self.d_ctx

    def fit_standardizers(self, records: Sequence[Record]) -> None:
        self.patch_shape = records[0].patch.shape
        self.img_std.fit(np.stack([patch_statistics(r.patch) for r in records]))
        self.ctx_std.fit(np.stack([context_inputs(r.state, r.layer, r.coords) for r in records]))

    # -- forward ---------------------------------------------------------
    def _img_pre(self, stats_std):
        return nnkit.dense_forward(stats_std, self.store["img.W"], self.store["img.b"])

    def _ctx_pre(self, ctx_std):
        return nnkit.dense_forward(ctx_std, self.store["ctx.W"], self.store["ctx.b"])

    def encode_image(self, patch) -> np.ndarray:
        patch = np.asarray(patch)
        if self.patch_shape is not None and patch.shape != self.patch_shape:
            raise ValueError(f"patch shape {patch.shape} does not match configured {self.patch_shape}")
        s = self.img_std.transform(patch_statistics(patch)[None])
        return nnkit.elu(self._img_pre(s))[0]

    def encode_context(self, state, layer: int, coords) -> np.ndarray:
        c = self.ctx_std.transform(context_inputs(state, layer, coords)[None])
        return nnkit.elu(self._ctx_pre(c))[0]

    def inputs(self, records: Sequence[Record]):
        stats = np.stack([patch_statistics(r.patch) for r in records])
        ctx = np.stack([context_inputs(r.state, r.layer, r.coords) for r in records])
        return self.img_std.transform(stats), self.ctx_std.transform(ctx)

    def embed(self, S: np.ndarray, C: np.ndarray):
        """Batch embeddings from standardised inputs: ``(z_img, z_ctx)``."""
        return nnkit.elu(self._img_pre(S)), nnkit.elu(self._ctx_pre(C))

    def encode_records(self, records: Sequence[Record]):
        return self.embed(*self.inputs(records))

    # -- warmup head -----------------------------------------------------
    def loss_and_grads(self, S, C, labels, smoothing=0.1):
        s = self.store
        a_img = self._img_pre(S)
        a_ctx = self._ctx_pre(C)
        x = np.concatenate([nnkit.elu(a_img), nnkit.elu(a_ctx)], axis=1)
        logits = nnkit.dense_forward(x, s["head.W"], s["head.b"])
        loss, dlog = nnkit.smoothed_cross_entropy(logits, labels, smoothing)
        dx, dWh, dbh = nnkit.dense_backward(dlog, x, s["head.W"])
        d_img = dx[:, :self.d_img] * nnkit.elu_grad(a_img)
        d_ctx = dx[:, self.d_img:] * nnkit.elu_grad(a_ctx)
        _, dWi, dbi = nnkit.dense_backward(d_img, S, s["img.W"])
        _, dWc, dbc = nnkit.dense_backward(d_ctx, C, s["ctx.W"])
        grads = {"img.W": dWi, "img.b": dbi, "ctx.W": dWc, "ctx.b": dbc,
                 "head.W": dWh, "head.b": dbh}
        return loss, grads, logits

    def scores(self, S, C) -> np.ndarray:
        x = np.concatenate(self.embed(S, C), axis=1)
        logits = nnkit.dense_forward(x, self.store["head.W"], self.store["head.b"])
        return nnkit.softmax_rows(logits)[:, 1]

    def save(self, path: str | Path) -> None:
        vals = dict(self.store.params)
        vals.update({"img_std.mean": self.img_std.mean, "img_std.scale": self.img_std.scale,
                     "ctx_std.mean": self.ctx_std.mean, "ctx_std.scale": self.ctx_std.scale})
        nnkit.save_params(vals, path)


def warmup_train(train: Sequence[Record], d_img: int = 48, d_ctx: int = 16, epochs: int = 5,
                 smoothing: float = 0.1, lr: float = 1e-2, weight_decay: float = 1e-4,
                 batch_size: int = 64, minority_target: float | None = 0.5,
                 rng: RngHandle = RngHandle(0, "warmup"), fit_records: Sequence[Record] | None = None):
    """Train both encoders and a two-row linear head with smoothed cross-entropy.

    ``train`` is the (possibly augmented) warmup stream; standardisers are
    fitted on ``fit_records`` (the unaugmented training split) when given.
    Returns ``(encoder, head_weights, history)``.
    """
    train = list(train)
    enc = Encoder.init(d_img, d_ctx, train[0].state.size, rng)
    enc.fit_standardizers(list(fit_records) if fit_records is not None else train)
    S, C = enc.inputs(train)
    y = np.array([r.label for r in train])
    gen = rng.child("sampler").generator()
    sampler = nnkit.weighted_sampler(y, minority_target, batch_size, gen)
    steps = max(1, int(np.ceil(len(train) / batch_size)))
    history = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps):
            idx = next(sampler)
            loss, grads, _ = enc.loss_and_grads(S[idx], C[idx], y[idx], smoothing)
            if not np.isfinite(loss):
                raise FloatingPointError(f"warmup loss became non-finite at epoch {epoch}")
            enc.store.set_grads(grads)
            nnkit.adam_step(enc.store, lr, weight_decay)
            total += loss
        history.append(total / steps)
    return enc, enc.store["head.W"].copy(), history


def importance_prior(W: np.ndarray) -> np.ndarray:
    """Column-wise mean absolute head weight: ``q_d = mean_h |W_hd|``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if not np.all(np.isfinite(W)):
        raise ValueError("head weights must be finite")
    return np.abs(W).mean(axis=0)


def write_importance(q: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("dim\tq\n")
        for d, v in enumerate(q):
            fh.write(f"{d}\t{float(v)!r}\n")


def read_importance(path: str | Path) -> np.ndarray:
    rows = Path(path).read_text().splitlines()[1:]
    return np.array([float(r.split("\t")[1]) for r in rows if r])
