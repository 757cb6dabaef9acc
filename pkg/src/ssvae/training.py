"""ADAM, schedules, the labeled/unlabeled training loop, evaluation, run driver."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .config import RunConfig
from .data import (
    Document,
    Split,
    SplitSpec,
    Vocab,
    batch_iter,
    build_vocab,
    load_corpus,
    make_split,
    synth_corpus,
)
from .diagnostics import discrimination_index, per_unit_kl
from .estimators import BaselineS1State, EstimatorConfig, baseline_s1_update, total_objective
from .model import SSVAE, one_hot
from .nn import save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class Adam:
    """ADAM with bias correction; moments keyed by parameter name."""

    def __init__(self, lr: float = 4e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ad.ShapeError("adam_step", params[name].shape, g.shape, detail=name)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class Schedule:
    """Linear move from ``start`` to ``end`` over the first ``ramp`` fraction of epochs, then hold."""

    name: str
    start: float
    end: float
    ramp: float = 0.5

    def value(self, epoch: int, total_epochs: int) -> float:
        if epoch > total_epochs:
            raise ValueError(f"epoch {epoch} beyond total {total_epochs}")
        span = self.ramp * total_epochs
        if span <= 0 or epoch >= span:
            return float(self.end)
        return float(self.start + (self.end - self.start) * (epoch / span))


def schedule_value(s: Schedule, epoch: int, total_epochs: int) -> float:
    return s.value(epoch, total_epochs)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    mean_bound: float | None
    n: int


def predict(model: SSVAE, batches) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = [], []
    for b in batches:
        preds.append(np.argmax(model.classify(b).data, axis=1))
        labels.append(b.labels)
    return np.concatenate(preds), np.concatenate(labels)


def evaluate(model: SSVAE, batches, with_bound: bool = True, seed: int = 0) -> EvalResult:
    """Argmax accuracy of q(y|x) and the mean labeled bound (kl weight 1, no dropout)."""
    batches = list(batches)
    if not batches:
        return EvalResult(float("nan"), None, 0)
    hits, total, bsum = 0, 0, 0.0
    rng = RngStream(seed, (99,))
    for k, b in enumerate(batches):
        pred = np.argmax(model.classify(b).data, axis=1)
        hits += int((pred == b.labels).sum())
        total += b.size
        if with_bound:
            rep = model.labeled_bound(b, b.labels, 1.0, noise=model.eval_noise(b, rng.child(k)))
            bsum += float(rep.bound.data.sum())
    return EvalResult(hits / total, bsum / total if with_bound else None, total)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunState:
    model: SSVAE
    cfg: RunConfig
    optimizer: Adam
    estimator: EstimatorConfig
    s1: BaselineS1State = field(default_factory=BaselineS1State)
    step: int = 0


REPORT_FIXED = [
    "epoch",
    "objective",
    "labeled_bound",
    "unlabeled_bound",
    "train_acc",
    "valid_acc",
    "d_index",
    "kl_total",
    "kl_weight",
    "word_dropout",
    "alpha",
    "s1_c",
    "wall_time",
]


def report_header(latent: int) -> list[str]:
    return REPORT_FIXED[:-1] + [f"kl_{j}" for j in range(latent)] + ["wall_time"]


def _stream(docs, vocab: Vocab, batch_size: int, seed: int, bucketing: bool):
    """Endless batch stream; each pass reshuffles with a derived seed."""
    cycle = 0
    while True:
        any_batch = False
        for b in batch_iter(docs, vocab, batch_size, seed=seed * 1000 + cycle, bucketing=bucketing):
            any_batch = True
            yield b
        if not any_batch:
            return
        cycle += 1


def train_epoch(
    state: RunState,
    labeled: list[Document],
    unlabeled: list,
    vocab: Vocab,
    epoch: int,
) -> dict:
    """One epoch: a labeled and an unlabeled batch per step, the shorter stream recycling."""
    cfg = state.cfg
    model = state.model
    T = cfg.epochs
    kl_w = Schedule("kl", cfg.kl_start, cfg.kl_end, cfg.kl_ramp).value(epoch, T)
    wd = Schedule("word_dropout", cfg.wd_start, cfg.wd_end, cfg.wd_ramp).value(epoch, T)
    alpha = Schedule("alpha", cfg.alpha_start, cfg.alpha_end, cfg.alpha_ramp).value(epoch, T)
    bs = cfg.batch_size
    n_l = -(-len(labeled) // bs)
    n_u = -(-len(unlabeled) // bs) if cfg.mode == "ssvae" else 0
    steps = max(n_l, n_u)
    seed = cfg.seed * 100003 + epoch
    lab = _stream(labeled, vocab, bs, seed * 2, cfg.bucketing)
    unl = _stream(unlabeled, vocab, bs, seed * 2 + 1, cfg.bucketing) if n_u else None
    sums = {"J": 0.0, "labeled_bound": 0.0, "unlabeled_bound": 0.0}
    counts = {"J": 0, "labeled_bound": 0, "unlabeled_bound": 0}
    step_rng = RngStream(cfg.seed, (3, epoch))
    params = model.params
    for s in range(steps):
        bl = next(lab, None)
        bu = next(unl, None) if unl is not None else None
        rng = step_rng.child(s)
        if cfg.mode == "supervised":
            loss, info = supervised_objective(model, bl, alpha, rng)
        else:
            loss, info = total_objective(
                model, bl, bu, alpha, kl_w, state.estimator, rng, state.s1, word_dropout=wd, train=True
            )
        grads = ad.backward(loss, params)
        if cfg.mode == "supervised":
            grads = {k: v for k, v in grads.items() if k.startswith("clf.")}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        clip_global_norm(grads, cfg.clip_norm)
        state.optimizer.step(params, grads)
        if "s1_targets" in info and state.estimator.baseline == "s1":
            state.s1 = baseline_s1_update(
                state.s1, info["s1_targets"], cfg.lr, "adam", (cfg.beta1, cfg.beta2), cfg.adam_eps
            )
        state.step += 1
        for k in sums:
            if k in info:
                sums[k] += info[k]
                counts[k] += 1
    return {
        "objective": sums["J"] / max(counts["J"], 1),
        "labeled_bound": sums["labeled_bound"] / counts["labeled_bound"] if counts["labeled_bound"] else float("nan"),
        "unlabeled_bound": sums["unlabeled_bound"] / counts["unlabeled_bound"] if counts["unlabeled_bound"] else float("nan"),
        "kl_weight": kl_w,
        "word_dropout": wd,
        "alpha": alpha,
    }


def supervised_objective(model: SSVAE, batch, alpha: float, rng: RngStream) -> tuple[Tensor, dict]:
    """alpha * mean cross-entropy of the classifier alone."""
    noise = model.draw_noise(batch, rng.child(0), train=True)
    logq = model.classify(batch, noise)
    ce = ad.mean(-ad.sum_(logq * one_hot(batch.labels, model.cfg.n_classes), axis=1))
    J = ce * alpha
    return J, {"J": J.item(), "ce": ce.item()}


# ---------------------------------------------------------------------------
# run driver


@dataclass
class RunData:
    split: Split
    vocab: Vocab
    n_classes: int


@dataclass
class RunResult:
    rows: list[dict]
    model: SSVAE
    summary: dict
    data: RunData
    state: RunState


def prepare_data(cfg: RunConfig) -> RunData:
    if cfg.data_path is not None:
        docs = load_corpus(cfg.data_path, cfg.max_len)
        test_docs = None
        if cfg.test_path is not None:
            test_docs = [d for d in load_corpus(cfg.test_path, cfg.max_len) if isinstance(d, Document)]
    elif cfg.synth:
        docs = synth_corpus(cfg.synth_spec())
        test_docs = synth_corpus(cfg.synth_spec(test=True)) if cfg.synth_test_size > 0 else []
    else:
        from .config import ConfigError

        raise ConfigError("data_path", "no corpus given")
    split = make_split(docs, SplitSpec(cfg.labeled_per_class, cfg.valid_fraction, cfg.test_fraction, cfg.seed))
    if test_docs is not None:
        split.test = list(test_docs)
    vocab = build_vocab(split.labeled + split.unlabeled, cfg.vocab_size, cfg.min_freq)
    labels = {d.label for d in docs if isinstance(d, Document)} | {d.label for d in split.test}
    n_classes = max(labels) + 1
    return RunData(split, vocab, n_classes)


def _eval_batches(docs, vocab, bs):
    return list(batch_iter(docs, vocab, bs, seed=None))


def run_training(cfg: RunConfig, data: RunData | None = None, out_dir=None, quiet: bool = True) -> RunResult:
    """Train per ``cfg``; with ``out_dir`` write config, report CSV, checkpoints, summary JSON."""
    data = data or prepare_data(cfg)
    vocab, split = data.vocab, data.split
    model = SSVAE(cfg.model_config(len(vocab), data.n_classes), seed=cfg.seed)
    state = RunState(model, cfg, Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps), cfg.estimator_config())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        vocab.save(out / "vocab.txt")
        split.save_manifest(out / "split.json")
    eb = 200
    lab_b = _eval_batches(split.labeled, vocab, eb)
    val_b = _eval_batches(split.valid, vocab, eb)
    rows: list[dict] = []
    best = (-1.0, -1)
    best_params = model.params.snapshot()
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        stats = train_epoch(state, split.labeled, split.unlabeled, vocab, epoch)
        wall = time.perf_counter() - t0
        train_acc = evaluate(model, lab_b, with_bound=False).accuracy
        valid_acc = evaluate(model, val_b, with_bound=False).accuracy if val_b else float("nan")
        row = {"epoch": epoch, **stats, "train_acc": train_acc, "valid_acc": valid_acc}
        if cfg.mode == "ssvae":
            row["d_index"] = discrimination_index(model, lab_b, RngStream(cfg.seed, (5,)), epoch).value
            kl = per_unit_kl(model, lab_b)
        else:
            row["d_index"] = float("nan")
            kl = np.full(cfg.latent, np.nan)
        row["kl_total"] = float(kl.sum())
        row["s1_c"] = state.s1.c
        for j, v in enumerate(kl):
            row[f"kl_{j}"] = float(v)
        row["wall_time"] = wall
        rows.append(row)
        if not quiet:
            log.info("epoch %d J=%.3f train=%.3f valid=%.3f D=%.3f (%.1fs)", epoch, row["objective"], train_acc, valid_acc, row["d_index"], wall)
        if out is not None:
            write_report(rows, out / "report.csv", cfg.latent)
            if cfg.checkpoint_every_epoch:
                save_checkpoint(model.params, out / f"epoch{epoch:03d}.ckpt")
        score = valid_acc if val_b else -row["objective"]
        if score > best[0]:
            best = (score, epoch)
            best_params = model.params.snapshot()
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if out is not None:
        save_checkpoint(model.params, out / "last.ckpt")
    model.params.load(best_params)
    test_b = _eval_batches(split.test, vocab, eb)
    test = evaluate(model, test_b, with_bound=True) if test_b else None
    summary = {
        "best_epoch": best[1],
        "best_valid_acc": best[0] if val_b else None,
        "test_acc": test.accuracy if test else None,
        "test_mean_bound": test.mean_bound if test else None,
        "epochs_run": len(rows),
        "n_labeled": len(split.labeled),
        "n_unlabeled": len(split.unlabeled),
        "n_valid": len(split.valid),
        "n_test": len(split.test),
    }
    if out is not None:
        save_checkpoint(model.params, out / "best.ckpt")
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunResult(rows, model, summary, data, state)


def write_report(rows: list[dict], path, latent: int) -> None:
    header = report_header(latent)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in header})
