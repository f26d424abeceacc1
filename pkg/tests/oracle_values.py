"""Frozen outputs of ``tests/oracles/generate.py`` (independent of rostlab)."""

# E[xi_1] for PD(0.5, 0), exact Laplace-transform integral
TOP_WEIGHT_PD05 = 0.626507598767175
# E cosh Z
G1_LOGCOSH = 1.64872127070013
LOGCOSH_MEAN = 0.374567207491438
LOGCOSH_SD = 0.435623058586624
# log E exp(0.5 log cosh(0.3 + Z sqrt(0.5)))
P1_LOGCOSH = 0.132787393979933
# E[psi(X) psi(Y)] for normalised log cosh at correlation q
C_LOGCOSH = {0.3: 0.0872365842122437, 0.5: 0.243534249662553, 0.64: 0.401068222571913}
# P(N(0, 1) > log 1.5)
SWAP_PROBABILITY = 0.342567830514846
# mean histogram mass at q_2, cascade x=(0.4, 0.8), M=(60, 1000), top 1000 leaves, 4000 replicas
W2_MASS = 0.5000924594679489
W2_MASS_SE = 0.0051204610855465375
# mean of sum_{i>5000} eta_i / sum_{i<=5000} eta_i, x = 0.3, N = 10^4, 2000 replicas
TAIL_RATIO_X03 = 3.3381816909189873e-09
