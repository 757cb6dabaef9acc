"""Gradient routes for the unlabeled term: exact enumeration or label sampling.

The sampled route builds a surrogate whose value is the Monte Carlo estimate
of -U(x) and whose gradient is the score-function estimator for the
classifier plus pathwise gradients for encoder and decoder.  The score term
is added as ``coef * (log q - stop_grad(log q))`` so it contributes gradient
but no value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .data import Batch
from .model import SSVAE, Noise, categorical_entropy, one_hot

KINDS = ("enumerate", "sample")
BASELINES = ("none", "s1", "s2")


@dataclass
class EstimatorConfig:
    kind: str = "enumerate"
    baseline: str = "none"
    K: int | None = None

    def __post_init__(self):
        self.baseline = self.baseline.lower()
        if self.kind not in KINDS:
            raise ValueError(f"estimator kind must be one of {KINDS}, got {self.kind!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.K is None:
            self.K = 2 if self.baseline == "s2" else 1
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.baseline == "s2" and self.K < 2:
            raise ValueError("baseline S2 needs K >= 2 sampled labels")

    @classmethod
    def parse(cls, name: str) -> "EstimatorConfig":
        """'enumerate', 'sample', 'sample-s1', 'sample-s2' (optionally ':K')."""
        name = name.lower()
        k = None
        if ":" in name:
            name, ks = name.split(":", 1)
            k = int(ks)
        if name == "enumerate":
            return cls("enumerate")
        if name == "sample":
            return cls("sample", "none", k)
        if name.startswith("sample-"):
            return cls("sample", name.split("-", 1)[1], k)
        raise ValueError(f"unknown estimator {name!r}")

    @property
    def tag(self) -> str:
        if self.kind == "enumerate":
            return "enumerate"
        return "sample" if self.baseline == "none" else f"sample-{self.baseline}"


@dataclass
class BaselineS1State:
    """Per-token scalar baseline, fit by its own squared-error regression."""

    c: float = 0.0
    m: float = 0.0
    v: float = 0.0
    t: int = 0


# ---------------------------------------------------------------------------
# baselines


def baseline_s1(batch: Batch, state: BaselineS1State) -> np.ndarray:
    """The per-token baseline value c for every example."""
    if np.any(batch.lengths < 1):
        raise ValueError("baseline S1 needs |x| >= 1 for every example")
    return np.full(batch.size, state.c)


def s1_coefficients(bounds: np.ndarray, lengths: np.ndarray, c: float) -> np.ndarray:
    """Length-normalized score coefficients -L(x, y_k)/|x| - c, shape (B, K)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if np.any(lengths < 1):
        raise ValueError("baseline S1 needs |x| >= 1 for every example")
    return np.asarray(bounds) / lengths[:, None] - c


def s1_regression_grad(targets: np.ndarray, c: float) -> float:
    """d/dc of mean (target - c)^2."""
    return float(-2.0 * np.mean(np.asarray(targets) - c))


def baseline_s1_update(
    state: BaselineS1State,
    targets: np.ndarray,
    step_size: float,
    optimizer: str = "sgd",
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> BaselineS1State:
    """One step on the baseline's own regression loss; returns a new state.

    ``targets`` are per-token values detached from the model graph.
    """
    g = s1_regression_grad(targets, state.c)
    if optimizer == "sgd":
        return BaselineS1State(state.c - step_size * g, state.m, state.v, state.t + 1)
    if optimizer == "adam":
        b1, b2 = betas
        t = state.t + 1
        m = b1 * state.m + (1 - b1) * g
        v = b2 * state.v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        return BaselineS1State(state.c - step_size * mhat / (np.sqrt(vhat) + eps), m, v, t)
    raise ValueError(f"unknown optimizer {optimizer!r}")


def baseline_s2(bounds: np.ndarray) -> np.ndarray:
    """Mean of the K sampled-label bounds per example, shape (B,)."""
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] < 2:
        raise ValueError("baseline S2 needs K >= 2 bounds per example")
    return bounds.mean(axis=1)


def score_coefficients(
    bounds: np.ndarray,
    cfg: EstimatorConfig,
    lengths: np.ndarray | None = None,
    c: float = 0.0,
) -> np.ndarray:
    """Multipliers on grad log q(y_k|x) for each sampled label, shape (B, K).

    S1 rescales the normalized coefficient by |x|, i.e. baseline c|x|.  S2
    rescales (f_k - mean f) by K/(K-1), which is the leave-one-out form:
    the plain mean includes f_k itself and would shrink the expected
    gradient by (K-1)/K.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if cfg.baseline == "none":
        return bounds
    if cfg.baseline == "s1":
        lengths = np.asarray(lengths, dtype=np.float64)
        return s1_coefficients(bounds, lengths, c) * lengths[:, None]
    K = bounds.shape[1]
    return (bounds - baseline_s2(bounds)[:, None]) * (K / (K - 1))


# ---------------------------------------------------------------------------
# unlabeled terms


def sample_labels(q: np.ndarray, K: int, rng: RngStream) -> np.ndarray:
    """K labels per example drawn with replacement from rows of q, shape (B, K)."""
    B = q.shape[0]
    return rng.categorical(np.repeat(q, K, axis=0)).reshape(B, K)


@dataclass
class SampledTerms:
    neg_u: Tensor  # (B,) value = MC estimate of -U(x)
    labels: np.ndarray
    bounds: np.ndarray
    coef: np.ndarray
    s1_targets: np.ndarray  # recon / |x| per sampled label, averaged over K
    logq: Tensor = field(repr=False, default=None)


def sampled_unlabeled_terms(
    model: SSVAE,
    batch: Batch,
    cfg: EstimatorConfig,
    kl_weight: float,
    noise: Noise,
    label_rng: RngStream | None = None,
    s1_state: BaselineS1State | None = None,
    labels: np.ndarray | None = None,
) -> SampledTerms:
    if cfg.kind != "sample":
        raise ValueError("sampled_unlabeled_terms needs a sample estimator")
    C = model.cfg.n_classes
    logq = model.classify(batch, noise)
    q = np.exp(logq.data)
    if labels is None:
        labels = sample_labels(q, cfg.K, label_rng)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = labels.shape
    rep = model.label_bounds(batch, labels, kl_weight, noise)
    f = rep.bound.data
    c = 0.0 if s1_state is None else s1_state.c
    coef = score_coefficients(f, cfg, batch.lengths, c)
    W = np.zeros((B, C))
    for k in range(K):
        W[np.arange(B), labels[:, k]] += coef[:, k] / K
    score = ad.sum_(logq * W, axis=1)
    score = score - score.data
    neg_u = ad.mean(rep.bound, axis=1) + categorical_entropy(logq) + score
    targets = (rep.recon.data / batch.lengths[:, None]).mean(axis=1)
    return SampledTerms(neg_u, labels, f, coef, targets, logq)


def unlabeled_objective(
    model: SSVAE,
    batch: Batch,
    cfg: EstimatorConfig,
    kl_weight: float,
    noise: Noise,
    label_rng: RngStream | None = None,
    s1_state: BaselineS1State | None = None,
    labels: np.ndarray | None = None,
) -> tuple[Tensor, dict]:
    """Batch mean of U(x) (to be minimized) along with diagnostics."""
    if cfg.kind == "enumerate":
        neg_u = model.unlabeled_bound_enumerated(batch, kl_weight, noise=noise)
        return -ad.mean(neg_u), {"neg_u": neg_u.data}
    st = sampled_unlabeled_terms(model, batch, cfg, kl_weight, noise, label_rng, s1_state, labels)
    return -ad.mean(st.neg_u), {"neg_u": st.neg_u.data, "s1_targets": st.s1_targets, "terms": st}


def unlabeled_grad_enumerate(model: SSVAE, batch: Batch, kl_weight: float, noise: Noise) -> dict[str, np.ndarray]:
    loss, _ = unlabeled_objective(model, batch, EstimatorConfig("enumerate"), kl_weight, noise)
    return ad.backward(loss, model.params)


def score_function_grad(
    model: SSVAE,
    batch: Batch,
    cfg: EstimatorConfig,
    kl_weight: float,
    noise: Noise,
    label_rng: RngStream | None = None,
    s1_state: BaselineS1State | None = None,
    labels: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    loss, _ = unlabeled_objective(model, batch, cfg, kl_weight, noise, label_rng, s1_state, labels)
    return ad.backward(loss, model.params)


def total_objective(
    model: SSVAE,
    labeled: Batch | None,
    unlabeled: Batch | None,
    alpha: float,
    kl_weight: float,
    estimator: EstimatorConfig,
    rng: RngStream,
    s1_state: BaselineS1State | None = None,
    word_dropout: float = 0.0,
    train: bool = True,
) -> tuple[Tensor, dict]:
    """J = mean L(x,y) + mean U(x) + alpha * mean CE over one labeled and one unlabeled batch."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    terms: list[Tensor] = []
    info: dict = {}
    if labeled is not None and labeled.size:
        noise_l = model.draw_noise(labeled, rng.child(0), train, word_dropout)
        rep = model.label_bounds(labeled, labeled.labels.reshape(-1, 1), kl_weight, noise_l)
        logq = model.classify(labeled, noise_l)
        ce = -ad.sum_(logq * one_hot(labeled.labels, model.cfg.n_classes), axis=1)
        terms.append(-ad.mean(rep.bound))
        if alpha > 0:
            terms.append(ad.mean(ce) * alpha)
        info["labeled_bound"] = float(rep.bound.data.mean())
        info["ce"] = float(ce.data.mean())
    if unlabeled is not None and unlabeled.size:
        noise_u = model.draw_noise(unlabeled, rng.child(1), train, word_dropout)
        u, uinfo = unlabeled_objective(model, unlabeled, estimator, kl_weight, noise_u, rng.child(2), s1_state)
        terms.append(u)
        info["unlabeled_bound"] = float(uinfo["neg_u"].mean())
        if "s1_targets" in uinfo:
            info["s1_targets"] = uinfo["s1_targets"]
    if not terms:
        raise ValueError("total_objective needs at least one nonempty batch")
    J = terms[0]
    for t in terms[1:]:
        J = J + t
    info["J"] = J.item()
    return J, info


# ---------------------------------------------------------------------------
# variance probe


@dataclass
class ClassifierGradBasis:
    """Ingredients that make any label draw's classifier gradient a linear map.

    ``bounds[i, y]`` is -L(x_i, y) under frozen noise, ``jac[i, y]`` the
    gradient of log q(y|x_i) at the probed coordinates, and ``grad_entropy``
    the gradient of mean_i H(q(.|x_i)).
    """

    coords: list[tuple[str, int]]
    q: np.ndarray
    bounds: np.ndarray
    jac: np.ndarray
    grad_entropy: np.ndarray
    lengths: np.ndarray

    def estimate(self, labels: np.ndarray, cfg: EstimatorConfig, c: float = 0.0) -> np.ndarray:
        """Gradient of batch-mean U(x) for each draw; labels (n, B, K) -> (n, P)."""
        labels = np.asarray(labels)
        n, B, K = labels.shape
        f = np.take_along_axis(np.broadcast_to(self.bounds, (n, B, self.bounds.shape[1])), labels, axis=2)
        coef = np.stack([score_coefficients(f[j], cfg, self.lengths, c) for j in range(n)])
        C = self.bounds.shape[1]
        W = np.zeros((n, B, C))
        for k in range(K):
            np.add.at(W, (np.arange(n)[:, None], np.arange(B)[None, :], labels[:, :, k]), coef[:, :, k] / K)
        score = np.einsum("niy,iyp->np", W, self.jac) / B
        return -score - self.grad_entropy[None, :]

    def exact(self) -> np.ndarray:
        """Enumerated gradient assembled from the same ingredients."""
        W = self.q * self.bounds
        return -np.einsum("iy,iyp->p", W, self.jac) / self.q.shape[0] - self.grad_entropy


def _flat(grads: dict[str, np.ndarray], coords: list[tuple[str, int]]) -> np.ndarray:
    return np.array([grads[name].reshape(-1)[j] for name, j in coords])


def select_coords(
    grads: dict[str, np.ndarray], names: list[str], n: int, rng: RngStream
) -> list[tuple[str, int]]:
    """Up to ``n`` coordinates drawn uniformly among those with nonzero gradient."""
    pool = [(name, int(j)) for name in names for j in np.flatnonzero(grads[name].reshape(-1))]
    if len(pool) <= n:
        return pool
    pick = np.sort(rng.choice(len(pool), n, replace=False))
    return [pool[i] for i in pick]


def classifier_grad_basis(
    model: SSVAE, batch: Batch, kl_weight: float, noise: Noise, coords: list[tuple[str, int]]
) -> ClassifierGradBasis:
    C = model.cfg.n_classes
    clf = model.group("clf")
    logq = model.classify(batch, noise)
    B = batch.size
    jac = np.zeros((B, C, len(coords)))
    for i in range(B):
        for y in range(C):
            g = ad.backward(logq[i, y], clf)
            jac[i, y] = _flat(g, coords)
    g_ent = _flat(ad.backward(ad.mean(categorical_entropy(logq)), clf), coords)
    rep = model.label_bounds(batch, np.tile(np.arange(C), (B, 1)), kl_weight, noise)
    return ClassifierGradBasis(coords, np.exp(logq.data), rep.bound.data.copy(), jac, g_ent, batch.lengths.copy())


@dataclass
class ProbeResult:
    coords: list[tuple[str, int]]
    mean: np.ndarray
    var: np.ndarray
    n: int
    exact: np.ndarray
    estimator: str

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var / self.n)

    def coord_ids(self) -> list[str]:
        return [f"{name}[{j}]" for name, j in self.coords]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self.to_csv(fh)

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["coordinate_id", "mean", "variance", "n"])
        for cid, m, v in zip(self.coord_ids(), self.mean, self.var):
            w.writerow([cid, repr(float(m)), repr(float(v)), self.n])


def estimator_variance_probe(
    model: SSVAE,
    batch: Batch,
    cfg: EstimatorConfig,
    n_draws: int,
    rng: RngStream,
    kl_weight: float = 1.0,
    coords: list[tuple[str, int]] | None = None,
    n_coords: int = 50,
    s1_c: float = 0.0,
    noise: Noise | None = None,
    basis: ClassifierGradBasis | None = None,
) -> ProbeResult:
    """Empirical mean / variance of the classifier-gradient estimator over label draws.

    Parameters and noise stay frozen; only the sampled labels vary.  The
    ``exact`` field is the enumerated gradient from an ordinary backward pass.
    """
    if noise is None:
        noise = model.draw_noise(batch, rng.child(0), train=False)
    exact_grads = unlabeled_grad_enumerate(model, batch, kl_weight, noise)
    clf_names = list(model.group("clf"))
    if coords is None:
        coords = select_coords(exact_grads, clf_names, n_coords, rng.child(1))
    exact = _flat(exact_grads, coords)
    if cfg.kind == "enumerate":
        return ProbeResult(coords, exact.copy(), np.zeros(len(coords)), n_draws, exact, cfg.tag)
    if basis is None or basis.coords != coords:
        basis = classifier_grad_basis(model, batch, kl_weight, noise, coords)
    B = batch.size
    lab_rng = rng.child(2)
    probs = np.repeat(basis.q, cfg.K, axis=0)
    draws = []
    chunk = 2000
    for s in range(0, n_draws, chunk):
        m = min(chunk, n_draws - s)
        labels = lab_rng.categorical(np.tile(probs, (m, 1))).reshape(m, B, cfg.K)
        draws.append(basis.estimate(labels, cfg, s1_c))
    est = np.concatenate(draws)
    return ProbeResult(coords, est.mean(axis=0), est.var(axis=0, ddof=1), n_draws, exact, cfg.tag)


def write_probe_csv(results: list[ProbeResult], path_or_file) -> None:
    """One row per (estimator, coordinate); accepts a path or an open text file."""
    if hasattr(path_or_file, "write"):
        _probe_rows(results, path_or_file)
        return
    with open(Path(path_or_file), "w", newline="") as fh:
        _probe_rows(results, fh)


def _probe_rows(results: list[ProbeResult], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["estimator", "coordinate_id", "mean", "variance", "n"])
    for r in results:
        for cid, m, v in zip(r.coord_ids(), r.mean, r.var):
            w.writerow([r.estimator, cid, repr(float(m)), repr(float(v)), r.n])
