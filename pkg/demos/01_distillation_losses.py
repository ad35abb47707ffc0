"""
Distillation losses on a toy batch
==================================

Three ways a student can learn from a teacher: match its class
probabilities, match its pairwise similarity structure, or match its
triplet geometry. Each loss is zero when the student copies the teacher.
"""

import numpy as np

from kdsearch import losses
from kdsearch.autograd import Tensor, softmax
from kdsearch.types import LossConfig

rng = np.random.default_rng(0)
B, D, C = 6, 8, 5

# teacher outputs are plain arrays: no gradient ever reaches them
t_emb = rng.normal(size=(B, D))
t_prob = softmax(Tensor(rng.normal(size=(B, C))), axis=1).data

# a student that copies the teacher pays nothing
print("copy   prob_kd", float(losses.prob_kd(t_prob, t_prob).data))
print("copy   pairwise", float(losses.pairwise_relation_kd(t_emb, t_emb).data))

# a random student does pay, and gradients flow back to its embeddings
s_emb = Tensor(rng.normal(size=(B, D)), requires_grad=True)
l_pr = losses.pairwise_relation_kd(s_emb, t_emb)
l_pr.backward()
print("random pairwise %.4f  |grad| %.4f" % (float(l_pr.data), np.linalg.norm(s_emb.grad)))

# the pairwise term only sees directions: rescaling either side changes nothing
print("scaled pairwise %.4f" % float(losses.pairwise_relation_kd(10 * s_emb.data, t_emb).data))

# the triplet term pulls each student row to its own teacher row and away from
# the hardest other one
for m in (0.0, 0.5, 2.0):
    print("triplet margin %.1f: %.4f" % (m, float(losses.triplet_relation_kd(s_emb.data, t_emb, m).data)))

# the training objective weighs all five terms
parts = dict(l_det=1.2, l_reid=2.0, l_p=0.3, l_pr=0.1, l_tr=0.5)
print("total", losses.weighted_total(parts, LossConfig()))
