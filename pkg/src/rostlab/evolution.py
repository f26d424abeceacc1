"""Correlated and free evolution of ROSts, increment functions and their transforms.

One evolution step multiplies every weight by ``exp(psi(kappa_i))`` where
``kappa`` is Gaussian with covariance ``Q^{*r}`` (i.i.d. under free
evolution), renormalises, re-ranks and conjugates the overlaps by the
re-ranking permutation.  Weights are handled in log-space throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .errors import QuadratureError, RostError, StructuralError
from .overlap import Hierarchy, OverlapMatrix, Rost, schur_power
from .pointproc import MassPartition
from .quadrature import TOL_1D, TOL_2D, gauss_hermite_expect, gauss_hermite_expect_2d, probabilists_rule
from .rpc import node_fields, tree_field_from_nodes

JITTER_STEPS = (0.0, 1e-12, 1e-10, 1e-8)


# -- increment functions --------------------------------------------------------


def _linear(z):
    return z


def _linear_d(z):
    return np.ones_like(z)


def _logcosh(z):
    a = np.abs(z)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def _logcosh_d(z):
    return np.tanh(z)


BASES: dict[str, tuple[Callable, Callable | None]] = {
    "linear": (_linear, _linear_d),
    "logcosh": (_logcosh, _logcosh_d),
}


@dataclass(frozen=True)
class PsiModel:
    """psi(z) = (scale * base(z) - shift) / norm.

    ``shift`` and ``norm`` are 0 and 1 unless centring / normalisation under
    the standard normal was requested; use :func:`make_psi` to build them.
    Tabulated models carry ``table = (grid, values)`` and are interpolated
    by a cubic spline, continued linearly outside the grid.
    """

    kind: str
    scale: float = 1.0
    shift: float = 0.0
    norm: float = 1.0
    table: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in BASES and self.kind != "tabulated":
            raise RostError(f"unknown psi kind {self.kind!r}")
        if self.kind == "tabulated" and self.table is None:
            raise RostError("tabulated psi needs a (grid, values) table")
        if not self.norm > 0:
            raise RostError("psi normaliser must be positive")

    @property
    def name(self) -> str:
        return f"{self.kind}({self.scale:g})"

    def _base(self, z):
        if self.kind == "tabulated":
            return _tabulated(self.table)(z)
        return BASES[self.kind][0](z)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, float)
        return (self.scale * self._base(z) - self.shift) / self.norm

    @property
    def has_derivative(self) -> bool:
        return self.kind in BASES

    def derivative(self, z) -> np.ndarray:
        if not self.has_derivative:
            raise RostError(f"{self.kind} psi has no registered derivative")
        return self.scale * BASES[self.kind][1](np.asarray(z, float)) / self.norm

    @property
    def is_constant(self) -> bool:
        return self.scale == 0.0

    def moments(self) -> tuple[float, float]:
        """(E psi(Z), E psi(Z)^2) under the standard normal."""
        return (gauss_hermite_expect(self), gauss_hermite_expect(lambda z: self(z) ** 2))

    def check_admissible(self, ts=(-2.0, -1.0, -0.5, 0.5, 1.0, 2.0)) -> None:
        """Exponential moments must be finite on a grid of t."""
        for t in ts:
            g_moment(self, t)


@lru_cache(maxsize=64)
def _tabulated(table):
    grid, vals = (np.asarray(t, float) for t in table)
    spl = CubicSpline(grid, vals, bc_type="natural")
    d0, d1 = spl(grid[0], 1), spl(grid[-1], 1)

    def f(z):
        z = np.asarray(z, float)
        out = spl(np.clip(z, grid[0], grid[-1]))
        out = np.where(z < grid[0], vals[0] + d0 * (z - grid[0]), out)
        return np.where(z > grid[-1], vals[-1] + d1 * (z - grid[-1]), out)

    return f


def make_psi(kind: str, scale: float = 1.0, centered: bool = False, normalized: bool = False,
             table=None) -> PsiModel:
    """Registry constructor; ``normalized`` implies centring and unit second moment."""
    kind = {"log-cosh": "logcosh", "log_cosh": "logcosh"}.get(kind, kind)
    if table is not None:
        table = (tuple(map(float, table[0])), tuple(map(float, table[1])))
    raw = PsiModel(kind, float(scale), table=table)
    if not (centered or normalized):
        return raw
    m, m2 = raw.moments()
    norm = 1.0
    if normalized:
        var = m2 - m * m
        if var <= 0:
            raise RostError("constant psi cannot be normalised")
        norm = float(np.sqrt(var))
    return PsiModel(kind, float(scale), shift=float(m), norm=norm, table=table)


@lru_cache(maxsize=4096)
def _g_cached(psi: PsiModel, t: float) -> float:
    return gauss_hermite_expect(lambda z: np.exp(t * psi(z)), tol=TOL_1D)


def g_moment(psi: PsiModel, t: float) -> float:
    """g(t) = E exp(t psi(Z)) for Z standard normal."""
    t = float(t)
    if t == 0.0:
        return 1.0
    try:
        val = _g_cached(psi, t)
    except QuadratureError as exc:
        raise RostError(f"exponential moment of {psi.name} at t={t:g} diverges: {exc}") from exc
    if not np.isfinite(val) or val <= 0:
        raise RostError(f"exponential moment of {psi.name} at t={t:g} is not finite")
    return val


# -- transforms -----------------------------------------------------------------


def psi_tilde(psi: PsiModel, x: float, rho: float, y, tol: float = TOL_1D):
    """log E exp(x psi(y + Z sqrt(1 - rho))), vectorised over ``y``."""
    if not 0.0 <= rho <= 1.0:
        raise RostError(f"rho must lie in [0, 1], got {rho}")
    y_arr = np.asarray(y, float)
    s = np.sqrt(1.0 - rho)
    if s == 0.0:
        out = x * psi(y_arr)
        return float(out) if np.ndim(y) == 0 else out
    flat = np.atleast_1d(y_arr).ravel()
    prev = None
    n = 16
    while n <= 2048:
        z, w = probabilists_rule(n)
        vals = x * psi(flat[:, None] + s * z[None, :])
        est = logsumexp(vals, b=w[None, :], axis=1)
        if not np.all(np.isfinite(est)):
            raise RostError("smoothed increment integral is not finite")
        if prev is not None and np.max(np.abs(est - prev) / np.maximum(1.0, np.abs(est))) <= tol:
            out = est.reshape(y_arr.shape)
            return float(out) if np.ndim(y) == 0 else out
        prev = est
        n *= 2
    raise RostError(f"smoothed increment quadrature did not reach {tol:g}")


def _c_pair(f, g, q: float, tol: float) -> float:
    return gauss_hermite_expect_2d(lambda a, b: f(a) * g(b), q, tol=tol)


def _require_normalized(psi: PsiModel, tol: float = 1e-8) -> None:
    m, m2 = psi.moments()
    if abs(m) > tol or abs(m2 - 1.0) > tol:
        raise RostError(f"{psi.name} is not normalised (mean {m:.3g}, second moment {m2:.6g})")


def c_psi(psi: PsiModel, q: float, tol: float = TOL_2D) -> float:
    """C(q) = E[psi(X) psi(Y)] for standard normals with correlation q."""
    if not -1.0 <= q <= 1.0:
        raise RostError(f"correlation must lie in [-1, 1], got {q}")
    _require_normalized(psi)
    try:
        return _c_pair(psi, psi, float(q), tol)
    except QuadratureError as exc:
        raise RostError(f"covariance quadrature failed at q={q:g}: {exc}") from exc


def c_psi_derivative_check(psi: PsiModel, q: float, h: float, tol: float = 1e-13) -> float:
    """|central difference of C at q - E[psi'(X) psi'(Y)]|."""
    if not psi.has_derivative:
        raise RostError(f"{psi.name} has no derivative; the identity cannot be checked")
    if not (-1.0 <= q - h and q + h <= 1.0):
        raise RostError("stencil leaves [-1, 1]")
    up = _c_pair(psi, psi, q + h, tol)
    dn = _c_pair(psi, psi, q - h, tol)
    rhs = _c_pair(psi.derivative, psi.derivative, q, tol)
    return abs((up - dn) / (2.0 * h) - rhs)


def hat_q(q: OverlapMatrix, r: int, psi: PsiModel) -> OverlapMatrix:
    """Entrywise C_psi of the Schur power Q^{*r}."""
    qr = schur_power(q, r).entries
    vals, inv = np.unique(qr, return_inverse=True)
    mapped = np.array([1.0 if v == 1.0 else c_psi(psi, float(v)) for v in vals])
    out = mapped[inv].reshape(qr.shape)
    np.fill_diagonal(out, 1.0)
    return OverlapMatrix(out, q.psd_tolerance)


# -- Gaussian fields ------------------------------------------------------------


def dense_factor(q: OverlapMatrix, r: int) -> np.ndarray:
    """Lower factor L with L L^T = Q^{*r} (+ jitter), escalating jitter on failure."""
    c = schur_power(q, r).entries
    eye = np.eye(c.shape[0])
    for eps in JITTER_STEPS:
        try:
            return np.linalg.cholesky(c + eps * eye)
        except np.linalg.LinAlgError:
            continue
    raise StructuralError(f"Q^*{r} is indefinite beyond the jitter budget {JITTER_STEPS[-1]:g}")


def sample_field_dense(q: OverlapMatrix, r: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Gaussian vector(s) with covariance Q^{*r}; shape (n,) or (size, n)."""
    lf = dense_factor(q, r)
    n = q.n
    if size is None:
        return lf @ rng.standard_normal(n)
    return rng.standard_normal((size, n)) @ lf.T


# -- evolution ------------------------------------------------------------------


class _Free:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "FREE"

    def __reduce__(self):
        return (_Free, ())


FREE = _Free()


@dataclass(frozen=True)
class EvolutionConfig:
    psi: PsiModel
    r: int | _Free = 1
    steps: int = 1
    field_sampler: str = "auto"  # auto | tree | dense
    record_increments: bool = False

    def __post_init__(self):
        if self.r is not FREE and (isinstance(self.r, bool) or int(self.r) != self.r or self.r < 1):
            raise RostError(f"power r must be a positive integer or FREE, got {self.r}")
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 1:
            raise RostError(f"steps must be a positive integer, got {self.steps}")
        if self.field_sampler not in ("auto", "tree", "dense"):
            raise RostError(f"unknown field sampler {self.field_sampler!r}")

    @property
    def free(self) -> bool:
        return self.r is FREE


@dataclass(frozen=True)
class EvolutionResult:
    """Outcome of ``steps`` evolution steps.

    ``permutation[i]`` is the final rank of the atom that had rank ``i``
    before; ``origin[m]`` is the prior rank of the atom now at rank ``m``.
    ``increments`` holds psi(kappa) per prior rank, summed over steps;
    ``kappa`` the field of the last step per prior rank.  When requested,
    ``increment_history`` has shape (steps, n), indexed by prior rank.
    """

    evolved: Rost
    permutation: np.ndarray
    origin: np.ndarray
    increments: np.ndarray
    kappa: np.ndarray
    increment_history: np.ndarray | None = None


def _dust_vectors(r: Rost) -> list[np.ndarray]:
    if r.hierarchy is not None:
        return [np.array(d, float) for d in r.hierarchy.dust]
    return [np.array([r.xi.remainder_mass])]


def evolve(r: Rost, cfg: EvolutionConfig, rng: np.random.Generator) -> EvolutionResult:
    """Apply the evolution map ``cfg.steps`` times.

    Residual (unstored) mass is moved by the conditional mean of its
    multiplier: for a hierarchy node at depth l with accumulated field c
    this is exp(psi_tilde(psi, 1, q_{l+1}^r, c)); without a hierarchy, or
    under free evolution, it is g(1).
    """
    n = r.n
    if r._q is not None and r.q.n != n:
        raise StructuralError(f"dimension mismatch: {n} atoms vs {r.q.n}x{r.q.n} overlaps")
    psi = cfg.psi
    h = r.hierarchy
    use_tree = (not cfg.free) and h is not None and cfg.field_sampler in ("auto", "tree")
    if cfg.field_sampler == "tree" and h is None and not cfg.free:
        raise RostError("tree field sampler requested but the ROSt has no hierarchy")
    factor = None
    if not cfg.free and not use_tree:
        factor = dense_factor(r.q, int(cfg.r))

    with np.errstate(divide="ignore"):
        logw = np.log(r.xi.weights)
    dust = _dust_vectors(r)
    origin = np.arange(n)
    total_inc = np.zeros(n)
    history = np.zeros((cfg.steps, n)) if cfg.record_increments else None
    kappa_last = np.zeros(n)
    g1 = None if psi.is_constant else g_moment(psi, 1.0)
    rho = None if cfg.free or h is None else np.asarray(h.q_levels, float) ** int(cfg.r)

    for t in range(cfg.steps):
        # field for the atoms currently at ranks 0..n-1
        if cfg.free:
            kappa = rng.standard_normal(n)
            nodes = None
        elif use_tree:
            cur = Hierarchy(h.labels[origin], h.q_levels, h.parents, h.dust)
            nodes = node_fields(cur, int(cfg.r), rng)
            kappa = tree_field_from_nodes(cur, nodes, int(cfg.r), rng)
        else:
            z = rng.standard_normal(n)
            kappa = (factor @ z)[origin]
            nodes = None
        inc = psi(kappa)
        logw = logw + inc
        # move residual mass
        if psi.is_constant:
            pass
        elif use_tree:
            dust = [d * np.exp(psi_tilde(psi, 1.0, float(rho[l]), nodes[l])) if d.any() else d
                    for l, d in enumerate(dust)]
        else:
            dust = [d * g1 for d in dust]
        dust_total = float(sum(d.sum() for d in dust))
        lognorm = logsumexp(np.append(logw, np.log(dust_total) if dust_total > 0 else -np.inf))
        if not np.isfinite(lognorm):
            raise RostError("normaliser is not finite after the evolution step")
        logw = logw - lognorm
        scale = np.exp(-lognorm)
        dust = [d * scale for d in dust]
        if np.any(np.isnan(logw)):
            raise RostError("NaN weight produced by evolution")
        order = np.argsort(-logw, kind="stable")
        logw = logw[order]
        origin = origin[order]
        inc_by_prior = np.empty(n)
        inc_by_prior[origin] = inc[order]
        total_inc += inc_by_prior
        kappa_last = np.empty(n)
        kappa_last[origin] = kappa[order]
        if history is not None:
            history[t] = inc_by_prior

    weights = np.exp(logw)
    rem = float(sum(d.sum() for d in dust))
    mp = MassPartition(weights, truncation_count=n, remainder_mass=rem, tail_index=r.xi.tail_index)
    if h is not None:
        new_h = h.reordered(origin, dust=tuple(dust))
        new_q = None if r._q is None else r.q.permuted(origin)
        evolved = Rost(mp, new_q, new_h)
    else:
        evolved = Rost(mp, r.q.permuted(origin))
    perm = np.empty(n, dtype=np.int64)
    perm[origin] = np.arange(n)
    return EvolutionResult(evolved, perm, origin, total_inc, kappa_last, history)


def evolve_partition_free(mp: MassPartition, psi: PsiModel, steps: int, rng: np.random.Generator,
                          track: bool = False):
    """Free evolution of a bare mass-partition.

    Returns the evolved partition and, if ``track``, the prior rank of every
    final atom together with the per-step field values (steps, n) by prior rank.
    """
    n = len(mp)
    with np.errstate(divide="ignore"):
        logw = np.log(mp.weights)
    rem = mp.remainder_mass
    g1 = 1.0 if psi.is_constant else g_moment(psi, 1.0)
    origin = np.arange(n)
    hist = np.zeros((steps, n)) if track else None
    for t in range(steps):
        kappa = rng.standard_normal(n)
        inc = psi(kappa)
        logw = logw + inc
        rem *= g1
        lognorm = logsumexp(np.append(logw, np.log(rem) if rem > 0 else -np.inf))
        logw -= lognorm
        rem *= np.exp(-lognorm)
        order = np.argsort(-logw, kind="stable")
        logw = logw[order]
        if track:
            hist[t, origin] = kappa
        origin = origin[order]
    out = MassPartition(np.exp(logw), truncation_count=n, remainder_mass=float(rem), tail_index=mp.tail_index)
    return (out, origin, hist) if track else out
