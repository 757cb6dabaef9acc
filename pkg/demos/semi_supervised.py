"""Unlabeled text helps the classifier.

With 50 labeled documents per class, a classifier trained on labels alone sees
only a handful of the class keywords.  The SSVAE also has to explain the
unlabeled documents, and the label that best explains each one is the class
whose keywords it contains, so the classifier learns the rest of the lexicon.

Run: python demos/semi_supervised.py   (about two minutes on one core)
"""
from ssvae.config import RunConfig
from ssvae.data import bayes_accuracy
from ssvae.training import run_training

cfg = RunConfig(epochs=12)
print(f"Bayes-optimal accuracy on this corpus: {bayes_accuracy(cfg.synth_spec()):.3f}")
for mode in ("supervised", "ssvae"):
    res = run_training(RunConfig.from_mapping({"mode": mode}, base=cfg))
    s = res.summary
    print(f"{mode:10s} best valid {s['best_valid_acc']:.3f} (epoch {s['best_epoch']})  test {s['test_acc']:.3f}")
