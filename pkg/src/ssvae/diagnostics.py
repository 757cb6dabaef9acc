"""Analysis instruments: decoder discrimination index, per-unit KL, latent dumps, generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .data import BOS, EOS, Batch
from .model import SSVAE, gaussian_kl_units, one_hot
from .nn import CellState, clstm1_step, clstm2_step, dense, embedding_lookup, lstm_step


@dataclass
class DIndexReport:
    value: float
    correct_per_class: dict[int, int]
    count_per_class: dict[int, int]
    n: int
    epoch: int | None = None


def discrimination_from_bounds(bounds: np.ndarray, labels: np.ndarray, n_classes: int | None = None) -> DIndexReport:
    """Fraction of rows whose true label has the highest bound (ties -> lowest label)."""
    bounds = np.asarray(bounds)
    labels = np.asarray(labels)
    if bounds.shape[0] == 0:
        raise ValueError("discrimination index of an empty set")
    C = n_classes or bounds.shape[1]
    hit = np.argmax(bounds, axis=1) == labels
    correct = {c: int(hit[labels == c].sum()) for c in range(C)}
    count = {c: int((labels == c).sum()) for c in range(C)}
    return DIndexReport(float(hit.mean()), correct, count, int(labels.size))


def label_bound_grid(model: SSVAE, batches: Iterable[Batch], rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """-L(x, y) for every label (kl weight 1, eval noise shared across labels)."""
    C = model.cfg.n_classes
    grids, labels = [], []
    for k, b in enumerate(batches):
        if b.labels is None:
            raise ValueError("discrimination index needs labeled batches")
        noise = model.eval_noise(b, rng.child(k))
        rep = model.label_bounds(b, np.tile(np.arange(C), (b.size, 1)), 1.0, noise)
        grids.append(rep.bound.data)
        labels.append(b.labels)
    if not grids:
        raise ValueError("discrimination index of an empty set")
    return np.concatenate(grids), np.concatenate(labels)


def discrimination_index(model: SSVAE, batches: Iterable[Batch], rng: RngStream, epoch: int | None = None) -> DIndexReport:
    bounds, labels = label_bound_grid(model, batches, rng)
    rep = discrimination_from_bounds(bounds, labels, model.cfg.n_classes)
    rep.epoch = epoch
    return rep


def per_unit_kl(model: SSVAE, batches: Iterable[Batch], use_labels: bool = True) -> np.ndarray:
    """Mean KL(q(z_i|x,y) || p(z_i)) per latent unit over the given examples.

    Labeled batches use their true labels; pass ``use_labels=False`` to
    weight each label by the classifier instead.
    """
    total = np.zeros(model.cfg.latent)
    n = 0
    C = model.cfg.n_classes
    for b in batches:
        xhat = model.encode_features(b)
        if use_labels and b.labels is not None:
            kl = gaussian_kl_units(model.posterior(xhat, one_hot(b.labels, C))).data
            total += kl.sum(axis=0)
        else:
            q = np.exp(model.classify(b).data)
            for y in range(C):
                kl = gaussian_kl_units(model.posterior(xhat, one_hot(np.full(b.size, y), C))).data
                total += (q[:, y : y + 1] * kl).sum(axis=0)
        n += b.size
    if n == 0:
        raise ValueError("per-unit KL of an empty set")
    return total / n


def dump_latents(model: SSVAE, batches: Iterable[Batch], rng: RngStream, path=None) -> list[tuple]:
    """z ~ q(z|x,y) for each labeled example; optional CSV (id, label, z_0..z_{d-1})."""
    rows = []
    C = model.cfg.n_classes
    for k, b in enumerate(batches):
        post = model.posterior(model.encode_features(b), one_hot(b.labels, C))
        eps = rng.child(k).normal(post.mu.shape)
        z = post.mu.data + np.exp(0.5 * post.log_var.data) * eps
        for i in range(b.size):
            rows.append((int(b.index[i]), int(b.labels[i]), z[i]))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label"] + [f"z_{j}" for j in range(model.cfg.latent)])
            for idx, lab, z in rows:
                w.writerow([idx, lab] + [repr(float(v)) for v in z])
    return rows


def generate(
    model: SSVAE,
    y: int | None,
    z: Sequence[float],
    mode: str = "greedy",
    max_len: int = 30,
    temperature: float = 1.0,
    rng: RngStream | None = None,
) -> list[int]:
    """Free-running decode from (y, z); stops at EOS (not returned) or max_len."""
    cfg = model.cfg
    if cfg.cell != "vanilla" and y is None:
        raise ValueError(f"{cfg.cell} decoder needs a label")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown generation mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an RngStream")
    p = model.params
    H = cfg.hidden
    zt = Tensor(np.asarray(z, dtype=np.float64).reshape(1, cfg.latent))
    y1h = Tensor(one_hot([0 if y is None else y], cfg.n_classes))
    init_in = ad.concat([y1h, zt], axis=1) if cfg.cell == "vanilla" else zt
    a = dense(p.view("dec.init"), init_in, "tanh").data
    state = CellState(Tensor(a[:, :H]), Tensor(a[:, H:]))
    lstm = {k: Tensor(v.data) for k, v in p.view("dec.lstm").items()}
    out_p = {k: Tensor(v.data) for k, v in p.view("dec.out").items()}
    emb = Tensor(p["dec.emb"].data)
    tok = BOS
    out: list[int] = []
    for _ in range(max_len):
        w = embedding_lookup(emb, [tok])
        if cfg.cell == "clstm1":
            state = clstm1_step(lstm, w, y1h, state)
        elif cfg.cell == "clstm2":
            state = clstm2_step(lstm, w, y1h, state)
        else:
            state = lstm_step(lstm, w, state)
        logits = dense(out_p, state.h).data[0]
        if mode == "greedy":
            tok = int(np.argmax(logits))
        else:
            s = logits / max(temperature, 1e-300)
            s = s - s.max()
            prob = np.exp(s)
            tok = int(rng.categorical(prob / prob.sum()))
        if tok == EOS:
            break
        out.append(tok)
    return out
