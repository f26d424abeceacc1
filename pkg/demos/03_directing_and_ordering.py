"""
Directing structure and the ordering of ancestors
=================================================

Recover the block structure behind a two-level cascade, then watch the
ordering of the ancestors of the two leading atoms lose its memory as the
number of past evolution steps grows.
"""

import numpy as np

from rostlab.evolution import make_psi
from rostlab.overlap import extract_directing
from rostlab.rpc import RpcSpec, sample_rpc
from rostlab.statlab import permutation_uniformity_test
from rostlab.streams import replica_rng

spec = RpcSpec(x_levels=(0.4, 0.8), q_levels=(0.2, 0.6), branching=(60, 1000), keep=1000)
rost, _ = sample_rpc(spec, replica_rng(7, "demo/directing"))

# blocks are the families sharing a first-level ancestor
d = extract_directing(rost)
print("number of blocks:", len(d.blocks), "scale q_max:", d.scale)
print("rescaled cross-block overlaps:", np.unique(d.q_tilde.offdiag()))
print("largest block frequencies:", np.round(d.xi_tilde.weights[:5], 3))

# P(the two leaders kept their ancestors' order) drifts to 1/2
rep = permutation_uniformity_test(0.5, make_psi("linear"), 2, [1, 10, 100, 1000, 10000], 5000, seed=11)
for t, p, row in zip([1, 10, 100, 1000, 10000], rep.details["p_preserved"], rep.tables["trend"]):
    print(f"T = {t:>6d}  P(order kept) = {p:.4f}  TV = {row['tv_distance']:.4f}")
