"""Finite-difference sweep over every differentiable component on tiny shapes.

Each row rebuilds its loss from frozen noise, so the two central-difference
evaluations see the same dropout masks, word-dropout inputs and epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .data import Batch
from .estimators import s1_regression_grad
from .model import SSVAE, ModelConfig, one_hot
from .nn import init_params, lstm_specs, unroll

TOLERANCE = 1e-4


@dataclass
class GradCheckRow:
    component: str
    max_rel_error: float
    n_params: int

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def toy_batch(B: int = 3, T: int = 5, vocab: int = 12, n_classes: int = 2, seed: int = 0) -> Batch:
    """Random padded batch with distinct lengths, the longest filling T."""
    rng = RngStream(seed, (7,))
    lengths = np.clip(T - np.arange(B) % T, 1, T).astype(np.int64)
    ids = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for i, L in enumerate(lengths):
        ids[i, :L] = 4 + np.floor(rng.uniform((L,)) * (vocab - 4)).astype(np.int64)
        ids[i, L - 1] = 3
        mask[i, :L] = 1.0
    labels = np.arange(B) % n_classes
    return Batch(ids, mask, lengths, labels, np.arange(B))


def _row(name: str, fn: Callable[[], Tensor], params, eps: float, n_coords: int, seed: int) -> GradCheckRow:
    err = ad.finite_difference_check(fn, params, eps=eps, n_coords=n_coords, seed=seed)
    n = sum(int(p.size) for p in params.values())
    return GradCheckRow(name, float(err), n)


def _cell_rows(eps, n_coords, seed) -> list[GradCheckRow]:
    rows = []
    B, T, E, H, C = 3, 4, 5, 6, 3
    rng = RngStream(seed, (1,))
    x = Tensor(rng.normal((B, T, E)))
    mask = np.ones((B, T))
    mask[1, 3:] = 0
    mask[2, 2:] = 0
    y = one_hot([0, 2, 1], C)
    w_out = rng.normal((H,))
    for k, kind in enumerate(("lstm", "clstm1", "clstm2")):
        params = init_params(lstm_specs("cell", E, H, kind, C), rng.child(k))
        view = params.view("cell")
        # perturb the biases away from their init so every block is exercised
        view["b"].data += 0.3 * rng.child(k, 1).normal(view["b"].shape)

        def loss(view=view, kind=kind):
            outs, st = unroll(kind, view, x, mask, None if kind == "lstm" else y)
            total = ad.sum_(st.c * st.c)
            for h in outs:
                total = total + ad.sum_(h @ Tensor(w_out.reshape(H, 1)))
            return total

        rows.append(_row(f"cell:{kind}", loss, params, eps, n_coords, seed))
    return rows


def _s1_row(eps, seed) -> GradCheckRow:
    rng = RngStream(seed, (2,))
    targets = rng.normal((7,)) - 3.0
    c = Tensor(np.array([0.4]), requires_grad=True)
    params = {"s1.c": c}

    def loss():
        d = Tensor(targets) - ad.broadcast(c, (targets.size,))
        return ad.mean(d * d)

    err = ad.finite_difference_check(loss, params, eps=eps)
    # the closed-form gradient used by the optimizer must agree as well
    num = (np.mean((targets - (0.4 + eps)) ** 2) - np.mean((targets - (0.4 - eps)) ** 2)) / (2 * eps)
    closed = s1_regression_grad(targets, 0.4)
    err = max(err, abs(closed - num) / max(1.0, abs(closed), abs(num)))
    return GradCheckRow("s1-regression", float(err), 1)


def run_gradcheck(
    seed: int = 0,
    eps: float = 1e-5,
    n_coords: int = 50,
    dropout: float = 0.2,
    word_dropout: float = 0.3,
) -> list[GradCheckRow]:
    """Max relative error per component; every row should sit below ``TOLERANCE``."""
    rows = _cell_rows(eps, n_coords, seed)
    V, C = 12, 2
    batch = toy_batch(vocab=V, n_classes=C, seed=seed)
    kl_w = 0.7

    models = {}
    for cell in ("vanilla", "clstm1", "clstm2"):
        cfg = ModelConfig(vocab_size=V, n_classes=C, emb_dim=4, hidden=5, latent=3, cell=cell, dropout=dropout)
        m = SSVAE(cfg, seed=seed)
        for j, t in enumerate(m.params.values()):  # break the zero-bias symmetry
            t.data += 0.05 * RngStream(seed, (3, j)).normal(t.shape)
        models[cell] = m
    noise = models["clstm2"].draw_noise(batch, RngStream(seed, (4,)), train=True, word_dropout_rate=word_dropout)

    def labeled(m):
        return lambda: -ad.mean(m.labeled_bound(batch, batch.labels, kl_w, noise=noise).bound)

    m2 = models["clstm2"]
    rows.append(_row("encoder", labeled(m2), m2.params.group("enc"), eps, n_coords, seed))

    def ce():
        logq = m2.classify(batch, noise)
        return -ad.mean(ad.sum_(logq * one_hot(batch.labels, C), axis=1))

    rows.append(_row("classifier", ce, m2.params.group("clf"), eps, n_coords, seed))
    for cell, m in models.items():
        rows.append(_row(f"decoder:{cell}", labeled(m), m.params.group("dec"), eps, n_coords, seed))
    rows.append(_row("labeled-bound", labeled(m2), m2.params, eps, n_coords, seed))

    def enumerated():
        return -ad.mean(m2.unlabeled_bound_enumerated(batch, kl_w, noise=noise))

    rows.append(_row("enumerated-bound", enumerated, m2.params, eps, n_coords, seed))
    rows.append(_s1_row(eps, seed))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    w = max(len(r.component) for r in rows)
    lines = [f"{'component':<{w}}  {'max_rel_error':>13}  {'n_params':>8}  status"]
    for r in rows:
        lines.append(f"{r.component:<{w}}  {r.max_rel_error:13.3e}  {r.n_params:8d}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
