"""
Domain mixup, step by step
==========================

Mixes a source and a target image, builds the class blocks the decoder is
conditioned on, and shows how the triplet roles flip around lambda = 0.5.
"""

import numpy as np

from dmada import data as D
from dmada.mixup import build_class_block, pixel_mixup, sample_lambda, triplet_roles

rng = np.random.default_rng(0)

# Beta(2, 2) concentrates the ratio around 0.5 without ever pinning it there
lam = sample_lambda(2.0, rng, 10_000)
print(f"lambda: mean {lam.mean():.3f}, var {lam.var():.4f} (expected 0.5, 0.05)")

# one digit and its inverted twin
digits = D.load_digits_8x8()
inverted = D.synth_shift(digits, "invert")
x_s, x_t = digits.images[:1], inverted.images[:1]
for l in (0.0, 0.3, 0.5, 1.0):
    x_m, _ = pixel_mixup(x_s, x_t, l)
    print(f"lambda={l:.1f}  mean pixel {x_m.data.mean():.3f}")

# class block: one-hot share for the known class, remainder goes to l_comp
y = int(digits.labels[0])
for kind in ("source", "target", "mixup"):
    b = build_class_block(kind, 10, None if kind == "target" else y, 0.3 if kind == "mixup" else None)
    print(f"{kind:6s} l_cls={np.round(b.l_cls, 2)} l_comp={b.l_comp:.2f}")

# anchor is always the mixed sample; the closer domain is the positive
for l in (0.1, 0.5, 0.9):
    anchor, pos, neg, margin = triplet_roles(l)
    print(f"lambda={l}: anchor {anchor}, positive {pos}, negative {neg}, margin {margin:.2f}")
