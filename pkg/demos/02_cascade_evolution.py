"""
Cascades under correlated evolution
===================================

Build a two-level cascade, look at its overlap law, push it through one
evolution step and compare the laws of a few statistics before and after.
"""

import numpy as np

from rostlab.evolution import EvolutionConfig, evolve, make_psi
from rostlab.overlap import overlap_histogram, state_space, ultrametric_check
from rostlab.rpc import RpcSpec, sample_rpc
from rostlab.statlab import qs_test
from rostlab.streams import replica_rng

spec = RpcSpec(x_levels=(0.25, 0.5), q_levels=(0.3, 0.7), branching=(30, 1000), keep=1000)
rost, tree = sample_rpc(spec, replica_rng(1, "demo/rpc"))

# overlaps take exactly the level values and are ultrametric; a finite sample
# usually holds some leaves without a stored sibling, so their rows miss q_2
ss = state_space(rost.q)
print("overlap values:", ss.global_values, "every row sees every value:", ss.indecomposable)
print("ultrametric:", ultrametric_check(rost.q).ok)

# law of the overlap of two atoms drawn by weight; it is random from sample to
# sample and only its mean settles, at x_1/x_2 and 1 - x_1/x_2
hist = overlap_histogram(rost)
print("overlap masses, one sample:", dict(zip(hist.values.tolist(), np.round(hist.masses, 3).tolist())))
mean = np.mean([overlap_histogram(sample_rpc(spec, replica_rng(1, "demo/hist", i))[0]).masses
                for i in range(200)], axis=0)
print("overlap masses, mean of 200:", np.round(mean, 3))

# one step with psi = log cosh and covariance Q^{*2}; the overlap matrix is conjugated exactly
cfg = EvolutionConfig(make_psi("logcosh"), r=2)
res = evolve(rost, cfg, replica_rng(3, "demo/evolve"))
print("new leader came from rank", int(res.origin[0]))
print("conjugation exact:", np.array_equal(res.evolved.q.entries, rost.q.entries[np.ix_(res.origin, res.origin)]))

# fresh samples against evolved samples: the laws should agree
rep = qs_test(lambda g: sample_rpc(spec, g)[0], cfg, 400, seed=5, levels=spec.q_levels)
for s in rep.statistics:
    print(f"  {s.name:15s} distance {s.distance:.4f}  p = {s.p_value:.3f}")
print("quasi-stationary at corrected alpha", rep.corrected_alpha, ":", rep.passed)
