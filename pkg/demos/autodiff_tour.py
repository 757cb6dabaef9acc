"""Reverse-mode autodiff in a few lines, then a gradient check of the whole model.

Run: python demos/autodiff_tour.py
"""
import numpy as np

from ssvae import autodiff as ad
from ssvae.autodiff import RngStream, Tensor
from ssvae.gradcheck import format_table, run_gradcheck

# A tiny logistic regression: the tape records every op, backward walks it in reverse.
rng = RngStream(0)
x = Tensor(rng.normal((8, 3)))
y = (x.data[:, 0] > 0).astype(float)
w = Tensor(np.zeros((3, 1)), requires_grad=True)


def loss():
    p = ad.sigmoid(ad.matmul(x, w))
    ll = Tensor(y[:, None]) * ad.log(p) + Tensor(1 - y[:, None]) * ad.log(1.0 - p)
    return -ad.mean(ll)


g = ad.backward(loss(), {"w": w})["w"]
print("analytic gradient at w=0:", g.ravel())
print("closed form X^T(p - y)/n  :", (x.data.T @ (0.5 - y)) / len(y))
print("max rel error vs central differences:", ad.finite_difference_check(loss, {"w": w}))

# The same machinery, applied to every network in the model with frozen noise.
print()
print(format_table(run_gradcheck(seed=0, n_coords=6)))
