"""Encoder q(z|x,y), decoder p(x|y,z), classifier q(y|x) and the variational bounds.

All per-example randomness (latent noise, word dropout, dropout masks) is
drawn up front into a :class:`Noise` bundle keyed by example.  When an
example is evaluated under several labels its noise is repeated, so every
label sees the same draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .data import BOS, UNK, Batch
from .nn import (
    CellState,
    ParamSet,
    apply_mask,
    dense,
    dense_specs,
    dropout_mask,
    embedding_lookup,
    init_params,
    lstm_specs,
    unroll,
    word_dropout,
)
from .nn import ParamSpec

DECODER_KINDS = ("vanilla", "clstm1", "clstm2")


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int = 2
    emb_dim: int = 32
    hidden: int = 64
    latent: int = 16
    cell: str = "clstm2"
    dropout: float = 0.0

    def __post_init__(self):
        if self.cell not in DECODER_KINDS:
            raise ValueError(f"unknown decoder cell kind {self.cell!r}; expected one of {DECODER_KINDS}")


@dataclass
class PosteriorParams:
    mu: Tensor
    log_var: Tensor


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray


@dataclass
class BoundReport:
    """Per-example pieces of the labeled bound; ``bound`` is -L(x, y)."""

    recon: Tensor
    kl: Tensor
    log_prior_y: Tensor
    bound: Tensor
    kl_units: Tensor | None = None
    kl_weight: float = 1.0


@dataclass
class Noise:
    eps: np.ndarray
    dec_inputs: np.ndarray
    enc_emb: np.ndarray | None = None
    dec_emb: np.ndarray | None = None
    clf_emb: np.ndarray | None = None
    enc_feat: np.ndarray | None = None
    clf_feat: np.ndarray | None = None
    dec_feat: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def shift_right(ids: np.ndarray) -> np.ndarray:
    """Decoder inputs: BOS followed by the gold tokens minus the last."""
    out = np.empty_like(ids)
    out[:, 0] = BOS
    out[:, 1:] = ids[:, :-1]
    return out


def reparameterize(post: PosteriorParams, noise) -> LatentSample:
    """z = mu + exp(log_var / 2) * eps; ``noise`` is an eps array or an RngStream."""
    eps = noise.normal(post.mu.shape) if isinstance(noise, RngStream) else np.asarray(noise, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise ad.ShapeError("reparameterize", post.mu.shape, eps.shape)
    sigma = ad.exp(post.log_var * 0.5)
    return LatentSample(post.mu + sigma * eps, eps)


def gaussian_kl_units(post: PosteriorParams) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) per latent unit, shape (B, d)."""
    mu, lv = post.mu, post.log_var
    return (mu * mu + ad.exp(lv) - lv - 1.0) * 0.5


def gaussian_kl(post: PosteriorParams) -> Tensor:
    return ad.sum_(gaussian_kl_units(post), axis=1)


def categorical_entropy(log_probs: Tensor) -> Tensor:
    """-sum p log p over the last axis."""
    return -ad.sum_(ad.exp(log_probs) * log_probs, axis=-1)


def model_specs(cfg: ModelConfig) -> list[ParamSpec]:
    V, C, E, H, L = cfg.vocab_size, cfg.n_classes, cfg.emb_dim, cfg.hidden, cfg.latent
    dec_cell = "lstm" if cfg.cell == "vanilla" else cfg.cell
    init_in = L + C if cfg.cell == "vanilla" else L
    return [
        ParamSpec("enc.emb", (V, E)),
        *lstm_specs("enc.lstm", E, H),
        *dense_specs("enc.mu", H + C, L),
        *dense_specs("enc.logvar", H + C, L),
        ParamSpec("dec.emb", (V, E)),
        *dense_specs("dec.init", init_in, 2 * H),
        *lstm_specs("dec.lstm", E, H, dec_cell, C),
        *dense_specs("dec.out", H, V),
        ParamSpec("clf.emb", (V, E)),
        *lstm_specs("clf.lstm", E, H),
        *dense_specs("clf.out", H, C),
    ]


class SSVAE:
    """Semi-supervised sequential VAE with a choice of decoder cell."""

    def __init__(self, cfg: ModelConfig, params: ParamSet | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(model_specs(cfg), RngStream(seed, (1,)))

    @property
    def log_prior_y(self) -> float:
        return -math.log(self.cfg.n_classes)

    def group(self, name: str) -> dict[str, Tensor]:
        return self.params.group(name)

    # -- noise ---------------------------------------------------------------

    def draw_noise(self, batch: Batch, rng: RngStream, train: bool = True, word_dropout_rate: float = 0.0) -> Noise:
        B, T = batch.ids.shape
        cfg = self.cfg
        eps = rng.normal((B, cfg.latent))
        dec_in = shift_right(batch.ids)
        if train and word_dropout_rate > 0:
            dec_in[:, 1:] = word_dropout(dec_in[:, 1:], word_dropout_rate, rng, UNK)
        rate = cfg.dropout if train else 0.0
        E, H = cfg.emb_dim, cfg.hidden
        return Noise(
            eps=eps,
            dec_inputs=dec_in,
            enc_emb=dropout_mask((B, T, E), rate, rng),
            dec_emb=dropout_mask((B, T, E), rate, rng),
            clf_emb=dropout_mask((B, T, E), rate, rng),
            enc_feat=dropout_mask((B, H), rate, rng),
            clf_feat=dropout_mask((B, H), rate, rng),
            dec_feat=dropout_mask((B, T, H), rate, rng),
        )

    def eval_noise(self, batch: Batch, rng: RngStream) -> Noise:
        return self.draw_noise(batch, rng, train=False)

    # -- networks ------------------------------------------------------------

    def classify(self, batch: Batch, noise: Noise | None = None) -> Tensor:
        """log q(y|x), shape (B, C)."""
        p = self.params
        _, state = unroll(
            "lstm",
            self.params.view("clf.lstm"),
            embedding_lookup(p["clf.emb"], batch.ids),
            batch.mask,
            emb_mask=None if noise is None else noise.clf_emb,
        )
        feat = apply_mask(state.h, None if noise is None else noise.clf_feat)
        return ad.log_softmax(dense(p.view("clf.out"), feat), axis=1)

    def encode_features(self, batch: Batch, noise: Noise | None = None) -> Tensor:
        """x_hat: final encoder LSTM state, shape (B, H)."""
        _, state = unroll(
            "lstm",
            self.params.view("enc.lstm"),
            embedding_lookup(self.params["enc.emb"], batch.ids),
            batch.mask,
            emb_mask=None if noise is None else noise.enc_emb,
        )
        return apply_mask(state.h, None if noise is None else noise.enc_feat)

    def posterior(self, xhat: Tensor, y_onehot) -> PosteriorParams:
        y = y_onehot if isinstance(y_onehot, Tensor) else Tensor(y_onehot)
        if y.ndim != 2 or y.shape[1] != self.cfg.n_classes or y.shape[0] != xhat.shape[0]:
            raise ad.ShapeError("encode", xhat.shape, y.shape, detail="label width must equal class count")
        feat = ad.concat([xhat, y], axis=1)
        return PosteriorParams(dense(self.params.view("enc.mu"), feat), dense(self.params.view("enc.logvar"), feat))

    def encode(self, batch: Batch, y, noise: Noise | None = None) -> PosteriorParams:
        y = np.asarray(y)
        y1h = y if y.ndim == 2 else one_hot(y, self.cfg.n_classes)
        return self.posterior(self.encode_features(batch, noise), y1h)

    def decode_logprob(
        self,
        dec_inputs: np.ndarray,
        targets: np.ndarray,
        mask: np.ndarray,
        y_onehot,
        z: Tensor,
        emb_mask: np.ndarray | None = None,
        feat_mask: np.ndarray | None = None,
    ) -> Tensor:
        """sum_t mask_t log p(x_t | x_<t, y, z), shape (B,)."""
        p = self.params
        cfg = self.cfg
        H, V = cfg.hidden, cfg.vocab_size
        y = y_onehot if isinstance(y_onehot, Tensor) else Tensor(np.asarray(y_onehot, dtype=np.float64))
        B, T = targets.shape
        if cfg.cell == "vanilla":
            init_in = ad.concat([y, z], axis=1)
        else:
            init_in = z
        a = dense(p.view("dec.init"), init_in, "tanh")
        initial = CellState(a[:, :H], a[:, H:])
        if T == 0 or not np.any(mask):
            return ad.sum_(z * 0.0, axis=1)
        cell = "lstm" if cfg.cell == "vanilla" else cfg.cell
        outs, _ = unroll(
            cell,
            p.view("dec.lstm"),
            embedding_lookup(p["dec.emb"], dec_inputs),
            mask,
            y=None if cell == "lstm" else y,
            initial=initial,
            emb_mask=emb_mask,
        )
        hs = apply_mask(ad.stack(outs, axis=1), feat_mask)
        logits = dense(p.view("dec.out"), ad.reshape(hs, (B * T, H)))
        lp = ad.log_softmax(logits, axis=1)
        sel = np.zeros((B * T, V))
        sel[np.arange(B * T), targets.reshape(-1)] = mask.reshape(-1)
        return ad.sum_(ad.reshape(ad.sum_(lp * sel, axis=1), (B, T)), axis=1)

    # -- bounds --------------------------------------------------------------

    def label_bounds(
        self,
        batch: Batch,
        labels: np.ndarray,
        kl_weight: float,
        noise: Noise,
        xhat: Tensor | None = None,
    ) -> BoundReport:
        """Bounds -L(x_i, labels[i, r]) for a (B, R) label grid, sharing each example's noise."""
        labels = np.asarray(labels, dtype=np.int64)
        B, R = labels.shape
        if xhat is None:
            xhat = self.encode_features(batch, noise)
        rows = np.repeat(np.arange(B), R)
        xr = xhat if R == 1 else ad.embedding_gather(xhat, rows)
        y1h = Tensor(one_hot(labels.reshape(-1), self.cfg.n_classes))
        post = self.posterior(xr, y1h)
        eps = noise.eps[rows]
        z = reparameterize(post, eps).z
        kl_units = gaussian_kl_units(post)
        kl = ad.sum_(kl_units, axis=1)

        def rep(a):
            return None if a is None else a[rows]

        recon = self.decode_logprob(
            noise.dec_inputs[rows],
            batch.ids[rows],
            batch.mask[rows],
            y1h,
            z,
            emb_mask=rep(noise.dec_emb),
            feat_mask=rep(noise.dec_feat),
        )
        lpy = Tensor(np.full(B * R, self.log_prior_y))
        bound = recon + lpy - kl * kl_weight

        def grid(t):
            return ad.reshape(t, (B, R))

        return BoundReport(
            grid(recon), grid(kl), grid(lpy), grid(bound), ad.reshape(kl_units, (B, R, self.cfg.latent)), kl_weight
        )

    def labeled_bound(
        self,
        batch: Batch,
        y=None,
        kl_weight: float = 1.0,
        rng: RngStream | None = None,
        noise: Noise | None = None,
    ) -> BoundReport:
        """Per-example -L(x, y) with one reparameterized z sample."""
        if not 0.0 <= kl_weight <= 1.0:
            raise ValueError("kl_weight must be in [0, 1]")
        y = batch.labels if y is None else np.asarray(y)
        if y is None:
            raise ValueError("labeled_bound needs labels")
        if noise is None:
            noise = self.draw_noise(batch, rng if rng is not None else RngStream(0), train=False)
        rep = self.label_bounds(batch, np.asarray(y).reshape(-1, 1), kl_weight, noise)
        flat = lambda t: ad.reshape(t, (batch.size,))  # noqa: E731
        return BoundReport(
            flat(rep.recon),
            flat(rep.kl),
            flat(rep.log_prior_y),
            flat(rep.bound),
            ad.reshape(rep.kl_units, (batch.size, self.cfg.latent)),
            kl_weight,
        )

    def unlabeled_bound_enumerated(
        self,
        batch: Batch,
        kl_weight: float = 1.0,
        rng: RngStream | None = None,
        noise: Noise | None = None,
        return_parts: bool = False,
    ):
        """-U(x) = sum_y q(y|x) (-L(x, y)) + H(q(y|x)), shape (B,)."""
        if noise is None:
            noise = self.draw_noise(batch, rng if rng is not None else RngStream(0), train=False)
        C = self.cfg.n_classes
        logq = self.classify(batch, noise)
        labels = np.tile(np.arange(C), (batch.size, 1))
        rep = self.label_bounds(batch, labels, kl_weight, noise)
        q = ad.exp(logq)
        ent = categorical_entropy(logq)
        neg_u = ad.sum_(q * rep.bound, axis=1) + ent
        if return_parts:
            return neg_u, {"logq": logq, "bounds": rep, "entropy": ent}
        return neg_u
