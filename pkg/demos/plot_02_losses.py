"""
Aligning silent predictions with normal ones
============================================

The alignment losses compare each predicted distribution with the average
prediction for its viseme class. Here we build those class averages for a
toy batch, evaluate the KL terms and confirm the hand-written gradients
against finite differences.
"""

import numpy as np

from visememl import autodiff as ad
from visememl.losses import (
    LossConfig, kl_seq, loss_kl, loss_within, representative_distributions, total_loss,
    weighted_target,
)

rng = np.random.default_rng(0)
C = 17


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# %%
# A normal and a silent utterance of the same three visemes.
y = np.array([3, 7, 3])
qn = softmax(rng.normal(size=(3, C)) + 4 * np.eye(C)[y])
qs = softmax(rng.normal(size=(3, C)) + 1 * np.eye(C)[y])  # less confident
sn = representative_distributions(qn, y)
ss = representative_distributions(qs, y)
print("classes with a representative:", np.flatnonzero(sn.present))

# %%
# KL pulls silent rows toward the normal class average; the within-type terms
# tighten each type around its own average. The weighted target sits between
# the two averages in proportion to the training counts.
print("KL(silent -> normal reps):", loss_kl(qs, y, sn).item())
print("within normal:", loss_within(qn, y, sn).item())
print("within silent:", loss_within(qs, y, ss).item())
M = weighted_target(sn, ss, n_normal=4, n_silent=1)
print("weighted target row 3 vs normal rep:", np.abs(M.reps[3] - sn.reps[3]).max())
print("self KL is zero:", kl_seq(qn, qn).item())

# %%
# Gradients with respect to the logits, with the class averages held fixed.
cfg = LossConfig.parse("NCE+SCE+WKL+NKL+SKL", n_normal=4, n_silent=1)
zn, zs = np.log(qn), np.log(qs)
flat = np.concatenate([zn.ravel(), zs.ravel()])


def objective(z):
    a = ad.softmax_rows(ad.reshape(z[:zn.size], zn.shape))
    b = ad.softmax_rows(ad.reshape(z[zn.size:], zs.shape))
    return total_loss((a, y), (b, y), cfg, {"N": sn, "S": ss})[0]


print("relative gradient error:", ad.grad_check(objective, flat))
