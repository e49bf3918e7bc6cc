"""
Anatomy of the loss
===================

The pieces behind the inversion objective on a grid small enough to print:
symmetric-KL distances, sigmoid anchors, the intra/inter clustering pull, the
two-view entropy term, and the nested-loop oracles that every fast kernel is
tested against.
"""

import numpy as np

from invseg import oracle
from invseg.autograd import value_of
from invseg.distance import DistanceMatrix, skl_matrix, soft_anchors
from invseg.loss import (AugmentSpec, CropWindow, cluster_loss, d_inter,
                         d_intra, entropy_loss, full_frame_spec, total_loss)

rng = np.random.default_rng(0)

# ----------------------------------------------------------------------------
# Symmetric KL between attention rows. Two hand rows first: (0.5, 0.5) vs
# (0.9, 0.1) comes out at 0.8 * ln 3 = 0.8789.
a = np.array([[0.5, 0.5], [0.9, 0.1]])
s = skl_matrix(a)
print(f"skl((0.5,0.5), (0.9,0.1)) = {s.as_f64()[0, 1]:.6f}  "
      f"(0.8*ln3 = {0.8 * np.log(3.0):.6f})")

# The anchors are a soft pixel selection: sigma(scale * (map - center)).
print(f"anchor weight at map value 1.0: "
      f"{float(value_of(soft_anchors(np.array([1.0]), 4.0, 0.5))[0]):.6f}")

# ----------------------------------------------------------------------------
# The clustering objective on a random 4x4 grid with three classes. Intra
# pulls anchor-weighted distances within a class down, inter pushes
# cross-class distances up; the combination is intra/C - 2*inter/(C(C-1)).
side, c = 4, 3
raw = rng.gamma(2.0, size=(side * side, side * side)) + 1e-6
attn = raw / raw.sum(axis=1, keepdims=True)
maps = rng.uniform(size=(c, side, side))
dist = skl_matrix(attn)

intra = float(value_of(d_intra(dist, maps.reshape(c, -1), 4.0)))
inter = float(value_of(d_inter(dist, maps.reshape(c, -1), 4.0)))
cluster = float(value_of(cluster_loss(dist, maps.reshape(c, -1), 4.0)))
print(f"\nd_intra {intra:.6f}  d_inter {inter:.6f}  cluster {cluster:+.6f}")
print(f"identity check: intra/C - 2*inter/(C(C-1)) = "
      f"{intra / c - 2 * inter / (c * (c - 1)):+.6f}")

# Every kernel has a brute-force twin written as plain Python loops; the
# acceptance suite holds them to 1e-5 relative agreement. Same numbers here:
s_loops = oracle.skl_matrix_loops(attn)
print(f"loop oracle cluster: "
      f"{oracle.cluster_loss_loops(s_loops, maps.reshape(c, -1), 4.0, 0.5):+.6f}")

# ----------------------------------------------------------------------------
# The entropy term scores the fused class distribution of augmented views.
# Uniform maps are maximally uncertain (log C); a one-hot stack scores zero.
uniform = np.full((c, side, side), 1.0 / c)
print(f"\nentropy(uniform) = {float(value_of(entropy_loss([uniform], full_frame_spec(side)))):.6f}"
      f"  log C = {np.log(c):.6f}")

onehot = np.zeros((c, side, side))
onehot[0] = 1.0
print(f"entropy(one-hot) = {float(value_of(entropy_loss([onehot], full_frame_spec(side)))):.2e}")

# ----------------------------------------------------------------------------
# Two overlapping crop views: the fused stack is a coverage-weighted mean and
# pixels outside both windows drop out of every sum in the total loss.
spec = AugmentSpec(source_h=side, source_w=side,
                   windows=(CropWindow(0, 0, 3, 3), CropWindow(1, 1, 3, 3)))
views = [maps[:, :3, :3], maps[:, 1:, 1:]]
node, breakdown = total_loss(dist, views, spec)
print(f"\ntwo-view total: cluster {breakdown.cluster:+.6f} "
      f"+ entropy {breakdown.entropy:.6f} = {breakdown.total:+.6f}")
print(f"degenerate class flags: {breakdown.degenerate_flags}")
