"""
The multi-negative preference loss
==================================

Scalar behaviour of the loss and its gradient weight, then the same loss on
a small transformer checked against finite differences.
"""

import math

import numpy as np

from dmporec import experiments as ex
from dmporec.objectives import DmpoConfig, dmpo_loss, dmpo_terms
from dmporec.seqmodel import PolicyPair

# rewards are beta * (log pi - log pi_ref) of whole completions
t = dmpo_terms(policy_chosen=-1.0, ref_chosen=-1.2,
               policy_rejected=[-2.0], ref_rejected=[-1.5], beta=1.0)
print(f"one negative: margin {t.margin:.2f}, loss {t.loss:.6f}, weight {t.weight:.4f}")
print(f"  check: -ln sigmoid(0.7) = {math.log1p(math.exp(-0.7)):.6f}")

# several negatives enter through the mean of their rewards
t = dmpo_terms(-1.0, -1.2, [-2.0, -1.2], [-1.5, -1.5], beta=1.0)
print(f"two negatives: mean rejected reward {t.mean_rejected_reward:.2f}, loss {t.loss:.6f}")

# the weight sigmoid(mean r_l - r_w) is large when the ranking is wrong
for margin in (-2.0, 0.0, 2.0):
    w = dmpo_terms(margin, 0.0, [0.0], [0.0], beta=1.0).weight
    print(f"margin {margin:+.1f} -> gradient weight {w:.3f}")

# on a model: policy == reference gives ln 2 for any k and beta
rng = np.random.default_rng(0)
pair = PolicyPair(ex.tiny_model(rng, adapters=True))
seqs = [ex._random_seq(rng, 17, 3, 3) for _ in range(4)]
out = dmpo_loss(pair, seqs[0], seqs[1:], DmpoConfig(beta=0.5, k=3))
print(f"\npolicy == reference: loss {out.loss:.12f}, ln 2 = {math.log(2):.12f}")

# analytic gradients against central differences
res = ex.gradient_suite(n_cases=4)
print(f"gradient check over {res.n_cases} checks: worst relative error {res.worst_rel_err:.2e}")
