"""Sampling the label instead of enumerating it: bias, variance and baselines.

For an unlabeled sentence the exact objective sums the labeled bound over all
classes, weighted by q(y|x).  Sampling one label is cheaper but noisy; a
baseline subtracted from the score coefficient keeps the mean and cuts the
spread.  The probe freezes parameters and noise so label draws are the only
source of randomness.

Run: python demos/estimator_variance.py
"""
import numpy as np

from ssvae.autodiff import RngStream
from ssvae.data import SynthSpec, batch_iter, build_vocab, synth_corpus
from ssvae.estimators import EstimatorConfig, estimator_variance_probe
from ssvae.model import SSVAE, ModelConfig

docs = synth_corpus(SynthSpec(size=200, length_range=(5, 9), seed=3))
vocab = build_vocab(docs)
model = SSVAE(ModelConfig(len(vocab), 2, emb_dim=16, hidden=16, latent=4), seed=0)
batch = next(batch_iter(docs[:10], vocab, 10, seed=None))
batch.labels = None

first = None
for name in ("enumerate", "sample", "sample-s1", "sample-s2:2", "sample-s2:4"):
    cfg = EstimatorConfig.parse(name)
    coords = first.coords if first else None
    r = estimator_variance_probe(model, batch, cfg, 5000, RngStream(1), coords=coords, n_coords=30, s1_c=-4.0)
    first = first or r
    z = np.abs(r.mean - r.exact) / np.maximum(r.se, 1e-300)
    print(f"{name:12s} median variance {np.median(r.var):.3e}   max |bias|/se {z.max():.2f}")
