import csv
import hashlib
import json

import numpy as np
import pytest

from ssvae.autodiff import Tensor
from ssvae.config import RunConfig
from ssvae.data import Document, batch_iter, build_vocab
from ssvae.model import SSVAE, ModelConfig
from ssvae.training import (
    Adam,
    NonFiniteGradientError,
    Schedule,
    clip_global_norm,
    evaluate,
    report_header,
    run_training,
    schedule_value,
)

SMALL = dict(
    synth_size=400,
    synth_test_size=100,
    labeled_per_class=10,
    emb_dim=8,
    hidden=8,
    latent=4,
    batch_size=25,
)


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    opt = Adam()
    opt.step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor(np.array([0.0, 0.0, 0.0]))}
    Adam(lr=4e-3).step(p, {"w": np.array([3.0, -0.01, 250.0])})
    np.testing.assert_allclose(p["w"].data, -4e-3 * np.array([1, -1, 1]), rtol=1e-5)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([1.5, -3.0, 0.25])
    p = {"w": Tensor(np.zeros(3))}
    opt = Adam(lr=0.05)
    for _ in range(5000):
        opt.step(p, {"w": 2 * (p["w"].data - target)})
        if np.max(np.abs(p["w"].data - target)) < 1e-6:
            break
    assert np.max(np.abs(p["w"].data - target)) < 1e-6


def test_adam_names_nonfinite_parameter():
    p = {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        Adam().step(p, {"a": np.ones(1), "b": np.array([1.0, np.nan])})
    assert np.all(p["a"].data == 0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(np.sqrt(g["a"] ** 2 + g["b"] ** 2), 1.0)
    h = {"a": np.array([0.3])}
    clip_global_norm(h, 5.0)
    assert h["a"][0] == 0.3


def test_schedule_endpoints_and_midpoint():
    kl = Schedule("kl", 0.0, 1.0, 0.5)
    assert kl.value(0, 20) == 0.0
    assert kl.value(10, 20) == 1.0 and kl.value(19, 20) == 1.0
    assert abs(schedule_value(kl, 5, 20) - 0.5) < 1e-12
    wd = Schedule("wd", 0.25, 0.5)
    vals = [wd.value(e, 13) for e in range(13)]
    assert max(vals) <= 0.5 and vals == sorted(vals)
    with pytest.raises(ValueError):
        kl.value(21, 20)


def _clf_model():
    docs = [Document(i, (("a", "b") if i % 2 else ("b", "a")) + ("</s>",), i % 2) for i in range(20)]
    v = build_vocab(docs)
    m = SSVAE(ModelConfig(len(v), 2, emb_dim=4, hidden=4, latent=2), seed=0)
    return m, list(batch_iter(docs, v, 7, seed=None))


def test_evaluate_zero_classifier_breaks_ties_to_first_class():
    m, batches = _clf_model()
    for k in m.group("clf.out"):
        m.params[k].data[...] = 0.0
    r = evaluate(m, batches)
    assert r.accuracy == 0.5 and r.n == 20


def test_evaluate_is_pure_and_deterministic():
    m, batches = _clf_model()
    digest = lambda: hashlib.sha256(b"".join(t.data.tobytes() for t in m.params.values())).hexdigest()  # noqa: E731
    before = digest()
    a, b = evaluate(m, batches), evaluate(m, batches)
    assert (a.accuracy, a.mean_bound) == (b.accuracy, b.mean_bound)
    assert digest() == before


def test_report_and_outputs(tmp_path):
    cfg = RunConfig(epochs=2, seed=1, **SMALL)
    res = run_training(cfg, out_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"config.txt", "report.csv", "best.ckpt", "last.ckpt", "vocab.txt", "split.json", "summary.json"} <= names
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and list(rows[0]) == report_header(4)
    kl = [float(rows[1][f"kl_{j}"]) for j in range(4)]
    assert abs(sum(kl) - float(rows[1]["kl_total"])) < 1e-10
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) >= {"best_epoch", "best_valid_acc", "test_acc"}
    assert RunConfig.load(tmp_path / "config.txt") == cfg
    assert res.rows[0]["kl_weight"] == 0.0


def test_empty_unlabeled_stream_still_trains():
    cfg = RunConfig(epochs=1, **{**SMALL, "labeled_per_class": None})
    res = run_training(cfg)
    assert res.summary["n_unlabeled"] == 0
    assert np.isnan(res.rows[0]["unlabeled_bound"]) and np.isfinite(res.rows[0]["labeled_bound"])


def test_supervised_mode_only_touches_classifier():
    cfg = RunConfig(epochs=1, mode="supervised", **SMALL)
    res = run_training(cfg)
    fresh = SSVAE(res.model.cfg, seed=cfg.seed)
    for k, t in res.model.params.items():
        same = np.array_equal(t.data, fresh.params[k].data)
        assert same != k.startswith("clf.")


@pytest.mark.parametrize("estimator,baseline", [("enumerate", "none"), ("sample", "s1")])
def test_same_seed_same_report(estimator, baseline):
    cfg = RunConfig(epochs=2, estimator=estimator, baseline=baseline, **SMALL)
    a, b = run_training(cfg), run_training(cfg)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]  # noqa: E731
    assert repr(strip(a.rows)) == repr(strip(b.rows))


def test_early_stopping_with_patience():
    cfg = RunConfig(epochs=30, patience=1, lr=0.0, **SMALL)
    res = run_training(cfg)
    # with lr 0 nothing improves after the first epoch
    assert len(res.rows) == 2 and res.summary["best_epoch"] == 0
