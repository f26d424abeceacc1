"""Power-tail Poisson processes, Poisson-Dirichlet mass-partitions and marked shifts.

A Poisson process on (0, inf) with intensity ``x s**(-x-1) ds`` has tail
``nu([s, inf)) = s**(-x)``, so its ordered atoms are ``Gamma_i**(-1/x)`` where
``Gamma_i`` are the arrival times of a unit-rate Poisson process.  The top
``N`` atoms are therefore sampled exactly; the mass below the last stored atom
is replaced by its conditional mean ``x/(1-x) * eta_N**(1-x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np
from scipy.special import digamma

from .errors import RostError
from .quadrature import gauss_hermite_expect

TOL_MASS = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _check_tail_index(x: float) -> float:
    x = float(x)
    if not (0.0 < x < 1.0):
        raise RostError(f"tail index must lie in (0, 1), got {x}")
    return x


def _check_count(n) -> int:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise RostError(f"atom count must be a positive integer, got {n}")
    return int(n)


@dataclass(frozen=True)
class MassPartition:
    """Nonincreasing weights, plus the estimated mass of the unstored atoms.

    ``normalizer`` is the factor relating weights to raw Poisson positions
    (only set when the partition was built from a Poisson realisation), and
    ``tail_index`` records the PD parameter when known.
    """

    weights: np.ndarray
    truncation_count: int | None = None
    remainder_mass: float = 0.0
    normalizer: float | None = None
    tail_index: float | None = None

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1 or w.size == 0:
            raise RostError("weights must be a non-empty 1-d array")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise RostError("weights must be finite and nonnegative")
        if w[0] <= 0:
            raise RostError("leading weight must be positive")
        if np.any(np.diff(w) > 0):
            raise RostError("weights must be nonincreasing")
        if self.remainder_mass < 0 or not np.isfinite(self.remainder_mass):
            raise RostError(f"remainder mass must be >= 0, got {self.remainder_mass}")
        if w.sum() + self.remainder_mass > 1 + TOL_MASS:
            raise RostError("weights and remainder exceed unit mass")
        object.__setattr__(self, "weights", w)
        if self.truncation_count is None:
            object.__setattr__(self, "truncation_count", int(w.size))

    def __len__(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum() + self.remainder_mass)

    @property
    def is_proper(self) -> bool:
        return abs(self.total_mass - 1.0) <= TOL_MASS

    def top(self, n: int) -> "MassPartition":
        """Keep the ``n`` largest atoms and fold the others into the remainder."""
        n = min(_check_count(n), len(self))
        folded = float(self.weights[n:].sum())
        return MassPartition(
            self.weights[:n],
            truncation_count=n,
            remainder_mass=self.remainder_mass + folded,
            normalizer=self.normalizer,
            tail_index=self.tail_index,
        )


@dataclass(frozen=True)
class MarkedPartition:
    base: MassPartition
    marks: np.ndarray
    mark_weights: np.ndarray

    def __post_init__(self):
        marks = _frozen(self.marks, dtype=np.int64)
        mw = _frozen(self.mark_weights)
        if marks.shape != self.base.weights.shape:
            raise RostError("one mark per stored atom is required")
        if np.any(mw < 0) or abs(mw.sum() - 1.0) > TOL_MASS:
            raise RostError("mark weights must be a probability vector")
        if marks.size and (marks.min() < 0 or marks.max() >= mw.size):
            raise RostError("marks must index the mark alphabet")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "mark_weights", mw)


# -- noise laws -----------------------------------------------------------------


@dataclass(frozen=True)
class StandardNormal:
    name: str = field(default="standard_normal", init=False)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(size)

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(gauss_hermite_expect(f, tol=1e-10))


@dataclass(frozen=True)
class PointMass:
    value: float = 0.0
    name: str = field(default="point_mass", init=False)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        return np.full(size, float(self.value))

    def expect(self, f) -> float:
        return float(np.asarray(f(np.array([float(self.value)])))[0])


@dataclass(frozen=True)
class FiniteDiscrete:
    values: tuple
    probs: tuple
    name: str = field(default="finite_discrete", init=False)

    def __post_init__(self):
        p = np.asarray(self.probs, float)
        if len(self.values) != p.size or np.any(p < 0) or abs(p.sum() - 1) > TOL_MASS:
            raise RostError("finite law needs matching values and a probability vector")

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.values), size=size, p=np.asarray(self.probs, float))
        return np.asarray(self.values, float)[idx]

    def expect(self, f) -> float:
        return float(np.dot(np.asarray(self.probs, float), np.asarray(f(np.asarray(self.values, float)))))


NoiseLaw = Union[StandardNormal, PointMass, FiniteDiscrete]

NOISE_LAWS = {"standard_normal": StandardNormal, "point_mass": PointMass, "finite_discrete": FiniteDiscrete}


# -- sampling -------------------------------------------------------------------


def sample_power_tail_poisson(x: float, n_atoms: int, rng: np.random.Generator) -> np.ndarray:
    """Top ``n_atoms`` atoms of the Poisson process with intensity x s^(-x-1) ds, descending."""
    x = _check_tail_index(x)
    n = _check_count(n_atoms)
    arrivals = np.cumsum(rng.standard_exponential(n))
    return arrivals ** (-1.0 / x)


def remainder_mean(x: float, last_atom: float) -> float:
    """Conditional mean of the total mass of atoms below ``last_atom``."""
    return x / (1.0 - x) * last_atom ** (1.0 - x)


def sample_pd(x: float, n_atoms: int, rng: np.random.Generator) -> MassPartition:
    """Truncated PD(x, 0) mass-partition with a first-order remainder correction."""
    eta = sample_power_tail_poisson(x, n_atoms, rng)
    rem = remainder_mean(x, eta[-1])
    zeta = float(eta.sum() + rem)
    return MassPartition(
        eta / zeta,
        truncation_count=eta.size,
        remainder_mass=rem / zeta,
        normalizer=zeta,
        tail_index=x,
    )


def mark_partition(mp: MassPartition, mark_weights: Sequence[float], rng: np.random.Generator) -> MarkedPartition:
    """Attach i.i.d. marks drawn from ``mark_weights`` to every stored atom."""
    mw = np.asarray(mark_weights, float)
    marks = rng.choice(mw.size, size=len(mp), p=mw)
    return MarkedPartition(mp, marks, mw)


# -- marked shift ---------------------------------------------------------------


@dataclass(frozen=True)
class ShiftResult:
    partition: MarkedPartition
    predicted_mark_law: np.ndarray
    moment_normalizer: float
    permutation: np.ndarray  # permutation[i] = new rank of old atom i
    noise: np.ndarray


def _law_for(noise_law, mark: int):
    if isinstance(noise_law, Mapping):
        return noise_law[mark]
    return noise_law


def marked_shift(
    mp: MarkedPartition,
    shift_fn: Callable[[int, np.ndarray], np.ndarray],
    noise_law: NoiseLaw | Mapping[int, NoiseLaw],
    rng: np.random.Generator,
    x: float | None = None,
) -> ShiftResult:
    """Multiply every atom by ``shift_fn(mark, noise)`` and re-rank.

    ``shift_fn(c, kappa)`` must be vectorised over ``kappa`` and return
    positive multipliers.  The predicted post-shift mark law is
    ``mu(c) E[W_c^x] / sum_c' mu(c') E[W_c'^x]``.  The unstored remainder is
    scaled by the mean multiplier, the law-of-large-numbers value for the
    infinitely many small atoms it stands for.
    """
    x = mp.base.tail_index if x is None else _check_tail_index(x)
    if x is None:
        raise RostError("marked_shift needs the PD tail index (pass x=...)")
    mu = mp.mark_weights
    moments = np.zeros(mu.size)
    means = np.zeros(mu.size)
    for c in range(mu.size):
        if mu[c] == 0:
            continue
        law = _law_for(noise_law, c)
        try:
            moments[c] = law.expect(lambda k, c=c: np.asarray(shift_fn(c, k), float) ** x)
            means[c] = law.expect(lambda k, c=c: np.asarray(shift_fn(c, k), float))
        except RostError as exc:
            raise RostError(f"moment integral E[W_{c}^x] is not finite: {exc}") from exc
    norm = float(np.dot(mu, moments))
    if not np.isfinite(norm) or norm <= 0:
        raise RostError(f"moment normalizer is not finite and positive (got {norm})")
    predicted = mu * moments / norm

    n = len(mp.base)
    noise = np.empty(n)
    mult = np.empty(n)
    for c in np.unique(mp.marks):
        sel = mp.marks == c
        kappa = np.asarray(_law_for(noise_law, int(c)).sample(int(sel.sum()), rng), float)
        noise[sel] = kappa
        mult[sel] = np.asarray(shift_fn(int(c), kappa), float)
    if not np.all(np.isfinite(mult)) or np.any(mult <= 0):
        raise RostError("shift multipliers must be finite and positive")

    raw = mp.base.weights * mult
    rem = mp.base.remainder_mass * float(np.dot(mu, means))
    total = raw.sum() + rem
    order = np.argsort(-raw, kind="stable")
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.arange(n)
    base = MassPartition(
        raw[order] / total,
        truncation_count=n,
        remainder_mass=rem / total,
        tail_index=mp.base.tail_index,
    )
    return ShiftResult(
        partition=MarkedPartition(base, mp.marks[order], predicted),
        predicted_mark_law=predicted,
        moment_normalizer=norm,
        permutation=perm,
        noise=noise,
    )


# -- tail-index estimation ------------------------------------------------------


@dataclass(frozen=True)
class PdFit:
    x_hat: float
    stderr: float
    slope: float
    intercept: float
    fit_range: tuple[int, int]
    regressor: str = "log"


def _ls_slope(lx: np.ndarray, ly: np.ndarray) -> tuple[float, float]:
    xm, ym = lx.mean(), ly.mean()
    dx = lx - xm
    b = float(np.dot(dx, ly - ym) / np.dot(dx, dx))
    return b, float(ym - b * xm)


def estimate_pd_x(
    mp: MassPartition | Sequence[float],
    fit_range: tuple[int, int],
    n_boot: int = 200,
    rng: np.random.Generator | None = None,
    regressor: str = "log",
) -> PdFit:
    """Tail index from the log-log slope of ranked weights.

    ``fit_range`` is a 1-based inclusive rank interval.  Since
    ``n**(1/x) xi_n`` converges, the slope of ``log xi_n`` against ``log n``
    is ``-1/x``.  With ``regressor="digamma"`` the abscissa is
    ``digamma(n) = E log Gamma_n`` instead, which removes the small-rank bias
    for exact PD(x, 0) input.  The standard error comes from a pairs
    bootstrap.
    """
    w = mp.weights if isinstance(mp, MassPartition) else np.asarray(mp, float)
    lo, hi = int(fit_range[0]), int(fit_range[1])
    if lo < 1 or hi > w.size or hi < lo:
        raise RostError(f"fit range {fit_range} outside the {w.size} stored atoms")
    if hi - lo + 1 < 10:
        raise RostError("fit range must contain at least 10 ranks")
    seg = w[lo - 1 : hi]
    if np.any(seg <= 0) or np.any(np.diff(seg) > 0):
        raise RostError("weights in the fit range must be positive and nonincreasing")
    ranks = np.arange(lo, hi + 1, dtype=float)
    if regressor == "log":
        lx = np.log(ranks)
    elif regressor == "digamma":
        lx = digamma(ranks)
    else:
        raise RostError(f"unknown regressor {regressor!r}")
    ly = np.log(seg)
    b, a = _ls_slope(lx, ly)
    if b >= 0:
        raise RostError("fitted slope is not negative; no power-law tail in range")

    rng = np.random.default_rng(0) if rng is None else rng
    boot = []
    m = lx.size
    for _ in range(n_boot):
        idx = rng.integers(0, m, m)
        if np.ptp(lx[idx]) == 0:
            continue
        bb, _ = _ls_slope(lx[idx], ly[idx])
        if bb < 0:
            boot.append(-1.0 / bb)
    se = float(np.std(boot, ddof=1)) if len(boot) > 1 else float("nan")
    return PdFit(x_hat=-1.0 / b, stderr=se, slope=b, intercept=a, fit_range=(lo, hi), regressor=regressor)
