"""Overlap matrices, ROSts and their structural algebra.

Covers Schur powers, monotone transforms, the ultrametric triple scan, value
sets S_Q and S_Q(i), the iterated factorisation by row tags, paintbox blocks
and extraction of the block-level (directing) structure.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import RostError, StructuralError
from .pointproc import MassPartition

VALUE_TOL = 1e-6
PSD_TOL = 1e-8


class OverlapMatrix:
    """Symmetric matrix with unit diagonal, entries in [-1, 1], PSD up to tolerance.

    Construction only requires a finite square array so that malformed input
    can still be inspected by :func:`validate_rost`; :meth:`require_valid`
    enforces the full set of invariants.
    """

    def __init__(self, entries, psd_tolerance: float = PSD_TOL):
        a = np.array(entries, dtype=float, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise RostError(f"overlap matrix must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise RostError("overlap matrix has non-finite entries")
        if psd_tolerance < 0:
            raise RostError("psd_tolerance must be nonnegative")
        a.flags.writeable = False
        self.entries = a
        self.psd_tolerance = float(psd_tolerance)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"OverlapMatrix(n={self.n})"

    @cached_property
    def min_eigenvalue(self) -> float:
        if self.n == 0:
            return 1.0
        return float(np.linalg.eigvalsh(self.entries)[0])

    @property
    def effective_psd_tolerance(self) -> float:
        return self.psd_tolerance * max(1, self.n)

    def offdiag(self) -> np.ndarray:
        iu = np.triu_indices(self.n, 1)
        return self.entries[iu]

    def violations(self, check_psd: bool = True) -> list[str]:
        a = self.entries
        out = []
        if self.n and not np.all(np.diag(a) == 1.0):
            out.append("diagonal entries differ from 1")
        if not np.array_equal(a, a.T):
            out.append("matrix is not symmetric")
        if np.any(np.abs(a) > 1.0):
            i, j = np.argwhere(np.abs(a) > 1.0)[0]
            out.append(f"entry-range violation: q[{i},{j}] = {a[i, j]:g}")
        if check_psd and self.min_eigenvalue < -self.effective_psd_tolerance:
            out.append(f"not positive semidefinite: min eigenvalue {self.min_eigenvalue:.6g}")
        return out

    def require_valid(self, check_psd: bool = True) -> "OverlapMatrix":
        v = self.violations(check_psd)
        if v:
            raise StructuralError("; ".join(v))
        return self

    def permuted(self, order: np.ndarray) -> "OverlapMatrix":
        """Matrix seen through the reordering ``new[m, n] = old[order[m], order[n]]``."""
        order = np.asarray(order)
        return OverlapMatrix(self.entries[np.ix_(order, order)], self.psd_tolerance)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.entries:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, psd_tolerance: float = PSD_TOL) -> "OverlapMatrix":
        rows = [list(map(float, r)) for r in csv.reader(io.StringIO(text)) if r]
        return cls(np.array(rows, dtype=float).reshape(len(rows), -1), psd_tolerance)

    @classmethod
    def constant(cls, n: int, q: float) -> "OverlapMatrix":
        a = np.full((n, n), float(q))
        np.fill_diagonal(a, 1.0)
        return cls(a)


@dataclass(frozen=True)
class Hierarchy:
    """Ancestry of stored atoms in a finite tree with per-node residual mass.

    ``labels[i, l]`` is the node id of atom ``i``'s ancestor at depth ``l``
    (depth 0 is the root), so two atoms whose deepest common ancestor sits at
    depth ``d`` have overlap ``q_levels[d]``.  ``parents[l][a]`` gives the
    depth ``l-1`` parent of depth-``l`` node ``a`` (``parents[0]`` is empty).
    ``dust[l][a]`` is mass held by unstored descendants of node ``a``.
    """

    labels: np.ndarray
    q_levels: np.ndarray
    parents: tuple
    dust: tuple

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64, copy=True)
        ql = np.array(self.q_levels, dtype=float, copy=True)
        if lab.ndim != 2 or lab.shape[1] != ql.size:
            raise RostError("labels must have one column per overlap level")
        lab.flags.writeable = False
        ql.flags.writeable = False
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "q_levels", ql)
        if len(self.parents) != ql.size or len(self.dust) != ql.size:
            raise RostError("parents and dust need one entry per depth")

    @property
    def depth(self) -> int:
        return int(self.q_levels.size)

    @property
    def n_nodes(self) -> tuple[int, ...]:
        return tuple(int(d.size) for d in self.dust)

    @property
    def dust_total(self) -> float:
        return float(sum(d.sum() for d in self.dust))

    def split_depth(self) -> np.ndarray:
        """Depth of the deepest common ancestor for every pair (diagonal = depth)."""
        n = self.labels.shape[0]
        d = np.zeros((n, n), dtype=np.int64)
        for l in range(1, self.depth):
            col = self.labels[:, l]
            d[col[:, None] == col[None, :]] = l
        np.fill_diagonal(d, self.depth)
        return d

    def overlap_entries(self) -> np.ndarray:
        levels = np.append(self.q_levels, 1.0)
        return levels[self.split_depth()]

    def reordered(self, order: np.ndarray, dust=None) -> "Hierarchy":
        return Hierarchy(self.labels[np.asarray(order)], self.q_levels, self.parents,
                         self.dust if dust is None else tuple(dust))


class Rost:
    """A mass-partition paired with an overlap matrix on its stored atoms.

    When a :class:`Hierarchy` is attached the overlap matrix may be omitted;
    it is then built from the ancestry on first access.
    """

    def __init__(self, xi: MassPartition, q: OverlapMatrix | None = None, hierarchy: Hierarchy | None = None):
        if q is None and hierarchy is None:
            raise RostError("a ROSt needs an overlap matrix or a hierarchy")
        self.xi = xi
        self._q = q
        self.hierarchy = hierarchy

    @property
    def q(self) -> OverlapMatrix:
        if self._q is None:
            self._q = OverlapMatrix(self.hierarchy.overlap_entries())
        return self._q

    @property
    def n(self) -> int:
        return len(self.xi)

    def __repr__(self) -> str:
        return f"Rost(n={self.n}, remainder={self.xi.remainder_mass:.3g})"


# -- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    issues: tuple[str, ...]
    min_eigenvalue: float
    n_values: int
    value_range: tuple[float, float] | None
    dimension_ok: bool


def validate_rost(r: Rost, check_psd: bool = True) -> ValidationReport:
    """Check partition and overlap invariants; reports problems rather than raising."""
    issues = []
    q = r.q
    dim_ok = q.n == len(r.xi)
    if not dim_ok:
        issues.append(f"dimension mismatch: {len(r.xi)} atoms vs {q.n}x{q.n} overlaps")
    if not r.xi.is_proper:
        issues.append(f"partition is not proper: total mass {r.xi.total_mass:.12g}")
    issues.extend(q.violations(check_psd))
    off = q.offdiag()
    vals = np.unique(off)
    return ValidationReport(
        valid=not issues,
        issues=tuple(issues),
        min_eigenvalue=q.min_eigenvalue if check_psd else float("nan"),
        n_values=int(vals.size),
        value_range=(float(vals[0]), float(vals[-1])) if vals.size else None,
        dimension_ok=dim_ok,
    )


# -- entrywise maps -------------------------------------------------------------


def schur_power(q: OverlapMatrix, r: int) -> OverlapMatrix:
    """Entrywise r-th power; positive semidefiniteness is preserved."""
    if isinstance(r, bool) or int(r) != r or r < 1:
        raise RostError(f"Schur power must be a positive integer, got {r}")
    if r == 1:
        return q
    return OverlapMatrix(q.entries ** int(r), q.psd_tolerance)


@dataclass(frozen=True)
class MonotoneMap:
    """Strictly increasing map of [0, 1] onto itself fixing 1.

    ``odd`` marks maps whose odd extension may be applied to negative entries.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    odd: bool = False

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, 257)
        vals = np.asarray(self.fn(grid), float)
        if abs(vals[-1] - 1.0) > 1e-12:
            raise RostError(f"monotone map {self.name!r} must fix 1")
        if np.any(np.diff(vals) <= 0) or vals[0] < 0:
            raise RostError(f"map {self.name!r} is not strictly increasing into [0, 1]")

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, float)
        if self.odd:
            return np.sign(q) * np.asarray(self.fn(np.abs(q)), float)
        return np.asarray(self.fn(q), float)


def power_map(p: float) -> MonotoneMap:
    p = float(p)
    if p <= 0:
        raise RostError("power map needs a positive exponent")
    return MonotoneMap(f"power:{p:g}", lambda q: np.power(q, p))


MONOTONE_MAPS: dict[str, Callable[..., MonotoneMap]] = {
    "identity": lambda: MonotoneMap("identity", lambda q: np.asarray(q, float), odd=True),
    "power": power_map,
    "sqrt": lambda: power_map(0.5),
    "square": lambda: power_map(2.0),
}


def monotone_map(name: str, *args) -> MonotoneMap:
    try:
        return MONOTONE_MAPS[name](*args)
    except KeyError:
        raise RostError(f"unknown monotone map {name!r}; known: {sorted(MONOTONE_MAPS)}") from None


def apply_monotone(q: OverlapMatrix, f: MonotoneMap) -> OverlapMatrix:
    """Entrywise image of the overlaps under a registered monotone map."""
    a = q.entries
    if np.any(a < 0) and not f.odd:
        raise RostError(f"negative overlaps need an odd-extensible map, {f.name!r} is not")
    out = np.array(f(a))
    np.fill_diagonal(out, 1.0)
    return OverlapMatrix(out, q.psd_tolerance)


# -- ultrametricity -------------------------------------------------------------


@dataclass(frozen=True)
class UltrametricVerdict:
    ok: bool
    n_violations: int
    violations: np.ndarray  # (m, 3) triples (i, j, k): q_ij < min(q_ik, q_kj) - tol
    worst_excess: float


def ultrametric_check(q: OverlapMatrix, tol: float = 0.0, max_report: int = 100) -> UltrametricVerdict:
    """Scan every triple for q_ij >= min(q_ik, q_kj) - tol."""
    a = q.entries
    n = q.n
    count = 0
    worst = 0.0
    found = []
    for k in range(n):
        m = np.minimum(a[:, k][:, None], a[k, :][None, :])
        bad = a < m - tol
        bad[k, :] = False
        bad[:, k] = False
        nb = int(np.count_nonzero(bad))
        if nb:
            count += nb
            worst = max(worst, float(np.max((m - a)[bad])))
            if len(found) < max_report:
                ij = np.argwhere(bad)
                ij = ij[ij[:, 0] < ij[:, 1]]
                for i, j in ij[: max_report - len(found)]:
                    found.append((int(i), int(j), k))
    # every unordered violating pair was counted twice
    viol = np.array(found, dtype=np.int64).reshape(-1, 3)
    return UltrametricVerdict(ok=count == 0, n_violations=count // 2, violations=viol, worst_excess=worst)


# -- value sets -----------------------------------------------------------------


@dataclass(frozen=True)
class StateSpace:
    global_values: tuple[float, ...]
    row_values: tuple[frozenset, ...]
    value_labels: np.ndarray = field(repr=False)  # cluster index per entry, -1 on the diagonal

    @property
    def indecomposable(self) -> bool:
        full = frozenset(range(len(self.global_values)))
        return all(s == full for s in self.row_values)

    def row_set(self, i: int) -> tuple[float, ...]:
        return tuple(self.global_values[c] for c in sorted(self.row_values[i]))


def _cluster_values(values: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy left-to-right clusters of diameter <= tol; representative = cluster minimum."""
    uniq = np.unique(values)
    if uniq.size == 0:
        return uniq, np.zeros(0, dtype=np.int64)
    starts = [0]
    for i in range(1, uniq.size):
        if uniq[i] - uniq[starts[-1]] > tol:
            starts.append(i)
    cid = np.zeros(uniq.size, dtype=np.int64)
    cid[starts[1:]] = 1
    cid = np.cumsum(cid)
    return uniq[starts], cid[np.searchsorted(uniq, values)]


def state_space(q: OverlapMatrix, value_tolerance: float = VALUE_TOL) -> StateSpace:
    """Merged off-diagonal value set S_Q and the per-row sets S_Q(i)."""
    a = q.entries
    n = q.n
    mask = ~np.eye(n, dtype=bool)
    reps, cid = _cluster_values(a[mask], value_tolerance)
    labels = np.full((n, n), -1, dtype=np.int64)
    labels[mask] = cid
    rows = []
    present = np.zeros((n, reps.size), dtype=bool)
    for c in range(reps.size):
        present[:, c] = (labels == c).any(axis=1)
    for i in range(n):
        rows.append(frozenset(np.flatnonzero(present[i]).tolist()))
    labels.flags.writeable = False
    return StateSpace(tuple(float(v) for v in reps), tuple(rows), labels)


# -- factorisation --------------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    rost: Rost
    indices: np.ndarray
    mass_share: float


@dataclass(frozen=True)
class Factorization:
    factors: tuple[Factor, ...]
    rounds: int
    n_values: int


def _sub_rost(r: Rost, idx: np.ndarray) -> tuple[Rost, float]:
    w = r.xi.weights[idx]
    share = float(w.sum())
    order = np.argsort(-w, kind="stable")
    idx_sorted = idx[order]
    mp = MassPartition(w[order] / share, tail_index=r.xi.tail_index)
    sub_q = OverlapMatrix(r.q.entries[np.ix_(idx_sorted, idx_sorted)], r.q.psd_tolerance)
    return Rost(mp, sub_q), share


def q_factorize(r: Rost, value_tolerance: float = VALUE_TOL, max_values: int = 64) -> Factorization:
    """Split atoms by their row tag S_Q(i) until every part is indecomposable.

    A round is one pass over the current parts; the last round is the one in
    which no part splits.  Tags are recomputed inside each part.
    """
    full = state_space(r.q, value_tolerance)
    if len(full.global_values) > max_values:
        raise RostError(
            f"{len(full.global_values)} distinct overlap values at tolerance {value_tolerance:g}; "
            f"state space is not finite at this resolution (limit {max_values})"
        )
    parts = [np.arange(r.n)]
    rounds = 0
    while True:
        rounds += 1
        if rounds > max(1, len(full.global_values)) + 1:
            raise StructuralError("factorisation did not settle within |S_Q| rounds")
        new_parts = []
        split = False
        for idx in parts:
            if idx.size < 2:
                new_parts.append(idx)
                continue
            ss = full if idx.size == r.n else state_space(
                OverlapMatrix(r.q.entries[np.ix_(idx, idx)]), value_tolerance)
            if ss.indecomposable:
                new_parts.append(idx)
                continue
            split = True
            groups: dict[frozenset, list[int]] = {}
            for local, tag in enumerate(ss.row_values):
                key = frozenset(ss.global_values[c] for c in tag)
                groups.setdefault(key, []).append(int(idx[local]))
            new_parts.extend(np.array(g, dtype=np.int64) for g in groups.values())
        parts = new_parts
        if not split:
            break
    if len(parts) == 1:
        return Factorization((Factor(r, np.arange(r.n), 1.0),), rounds, len(full.global_values))
    total = float(r.xi.weights.sum())
    factors = []
    for idx in parts:
        idx = np.sort(idx)
        sub, share = _sub_rost(r, idx)
        factors.append(Factor(sub, idx, share / total))
    factors.sort(key=lambda f: -f.mass_share)
    return Factorization(tuple(factors), rounds, len(full.global_values))


# -- paintbox and directing structure -------------------------------------------


@dataclass(frozen=True)
class BlockPartition:
    """Blocks of the relation q_ij >= q_max - tol, largest density first.

    ``densities`` is the xi-mass share when weights were supplied and the
    counting fraction otherwise; both are kept separately as well.
    ``deficient_rows`` lists atoms whose row maximum falls short of q_max.
    """

    blocks: tuple[np.ndarray, ...]
    counting_densities: np.ndarray
    mass_densities: np.ndarray | None
    q_max: float
    deficient_rows: np.ndarray
    indecomposable: bool

    @property
    def densities(self) -> np.ndarray:
        return self.counting_densities if self.mass_densities is None else self.mass_densities

    def labels(self, n: int) -> np.ndarray:
        lab = np.empty(n, dtype=np.int64)
        for b, idx in enumerate(self.blocks):
            lab[idx] = b
        return lab


def paintbox_blocks(
    q: OverlapMatrix, value_tolerance: float = VALUE_TOL, weights: np.ndarray | None = None
) -> BlockPartition:
    """Equivalence classes of 'overlap equals the top value'.

    Raises :class:`StructuralError` if the relation is not transitive on the
    sample.  Finite samples of an indecomposable structure often contain
    atoms without a partner at the top value; those are reported in
    ``deficient_rows`` and become singleton blocks.
    """
    a = q.entries
    n = q.n
    if n < 2:
        raise RostError("paintbox needs at least two atoms")
    ss = state_space(q, value_tolerance)
    off = q.offdiag()
    q_max = float(off.max())
    rel = a >= q_max - value_tolerance
    np.fill_diagonal(rel, True)
    n_comp, comp = connected_components(csr_matrix(rel), directed=False)
    order = np.argsort(comp, kind="stable")
    sizes = np.bincount(comp, minlength=n_comp)
    # transitivity: every pair inside a component must be related
    related_pairs = np.bincount(comp, weights=rel.sum(axis=1), minlength=n_comp)
    if np.any(related_pairs != sizes.astype(float) ** 2):
        bad = int(np.flatnonzero(related_pairs != sizes.astype(float) ** 2)[0])
        raise StructuralError(
            f"top-overlap relation is not transitive (component {bad}); "
            "sample is not consistent with a discrete directing measure"
        )
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    blocks = [np.sort(order[s : s + m]) for s, m in zip(starts, sizes)]
    counting = sizes / n
    mass = None
    if weights is not None:
        w = np.asarray(weights, float)
        mass = np.bincount(comp, weights=w, minlength=n_comp) / w.sum()
    key = mass if mass is not None else counting
    rank = np.lexsort((np.array([b[0] for b in blocks]), -key))
    row_max = np.where(np.eye(n, dtype=bool), -np.inf, a).max(axis=1)
    deficient = np.flatnonzero(row_max < q_max - value_tolerance)
    return BlockPartition(
        blocks=tuple(blocks[i] for i in rank),
        counting_densities=counting[rank],
        mass_densities=None if mass is None else mass[rank],
        q_max=q_max,
        deficient_rows=deficient,
        indecomposable=ss.indecomposable,
    )


@dataclass(frozen=True)
class DirectingRost:
    """Block-level structure: weights, rescaled cross-block overlaps and the scale q_max.

    ``xi_tilde`` holds counting densities of the blocks; ``mass_weights``
    holds the xi-mass of the same blocks in the same order.
    """

    xi_tilde: MassPartition
    q_tilde: OverlapMatrix
    scale: float
    mass_weights: np.ndarray
    blocks: tuple[np.ndarray, ...]


def extract_directing(r: Rost, value_tolerance: float = VALUE_TOL) -> DirectingRost:
    pb = paintbox_blocks(r.q, value_tolerance, weights=r.xi.weights)
    if pb.q_max <= 0:
        raise RostError(f"top overlap {pb.q_max:g} <= 0: no discrete directing structure")
    # order blocks by counting density (ties: earliest atom first)
    counts = np.array([b.size for b in pb.blocks])
    firsts = np.array([b[0] for b in pb.blocks])
    rank = np.lexsort((firsts, -counts))
    blocks = tuple(pb.blocks[i] for i in rank)
    nb = len(blocks)
    order = np.concatenate(blocks)
    starts = np.concatenate([[0], np.cumsum([b.size for b in blocks])[:-1]])
    a = r.q.entries[np.ix_(order, order)]
    lo = np.minimum.reduceat(np.minimum.reduceat(a, starts, axis=0), starts, axis=1)
    hi = np.maximum.reduceat(np.maximum.reduceat(a, starts, axis=0), starts, axis=1)
    off = ~np.eye(nb, dtype=bool)
    if np.any((hi - lo)[off] > value_tolerance):
        i, j = np.argwhere(((hi - lo) > value_tolerance) & off)[0]
        raise StructuralError(
            f"cross-block overlaps between blocks {i} and {j} vary over [{lo[i, j]:g}, {hi[i, j]:g}]"
        )
    qt = lo / pb.q_max
    np.fill_diagonal(qt, 1.0)
    weights = r.xi.weights
    mass = np.array([weights[b].sum() for b in blocks]) / weights.sum()
    xi_t = MassPartition(counts[rank] / r.n)
    return DirectingRost(xi_t, OverlapMatrix(qt), pb.q_max, mass, blocks)


# -- overlap law ----------------------------------------------------------------


@dataclass(frozen=True)
class OverlapHistogram:
    values: np.ndarray
    masses: np.ndarray

    def mass_at(self, value: float, tol: float = VALUE_TOL) -> float:
        hit = np.abs(self.values - value) <= tol
        return float(self.masses[hit].sum())


def overlap_histogram(r: Rost, value_tolerance: float = VALUE_TOL) -> OverlapHistogram:
    """Law of q_ij for two distinct atoms drawn with probabilities xi_i xi_j."""
    if r.n < 2:
        raise RostError("overlap histogram needs at least two atoms")
    w = r.xi.weights
    if r.hierarchy is not None and r._q is None:
        h = r.hierarchy
        sq = float(np.dot(w, w))
        # mass of pairs whose common ancestor is at depth >= l
        at_least = []
        for l in range(h.depth):
            s = np.bincount(h.labels[:, l], weights=w)
            at_least.append(float(np.dot(s, s)) - sq)
        at_least.append(0.0)
        masses = np.diff(-np.array(at_least))
        total = at_least[0]
        return OverlapHistogram(np.array(h.q_levels), masses / total)
    ss = state_space(r.q, value_tolerance)
    W = np.outer(w, w)
    np.fill_diagonal(W, 0.0)
    lab = ss.value_labels
    nv = len(ss.global_values)
    masses = np.bincount(lab[lab >= 0], weights=W[lab >= 0], minlength=nv)
    return OverlapHistogram(np.array(ss.global_values), masses / masses.sum())
