"""Finite Ruelle probability cascades.

Every node at depth ``l`` carries the top ``M_{l+1}`` atoms of a Poisson
process with tail index ``x_{l+1}``; leaf weights are products along the
root-to-leaf path.  Mass that is not stored explicitly (the Poisson tails
beyond ``M`` at each node and leaves ranked below ``keep``) is kept as
per-node residual mass so that evolution can move it with the right
ancestor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import gamma, prod

import numpy as np

from .errors import RostError
from .overlap import Hierarchy, Rost
from .pointproc import MassPartition, remainder_mean, sample_power_tail_poisson

LEAF_BUDGET = 2_000_000


@dataclass(frozen=True)
class RpcSpec:
    x_levels: tuple[float, ...]
    q_levels: tuple[float, ...]
    branching: tuple[int, ...]
    keep: int | None = None
    leaf_budget: int = LEAF_BUDGET

    def __post_init__(self):
        xs = tuple(float(v) for v in self.x_levels)
        qs = tuple(float(v) for v in self.q_levels)
        br = self.branching
        br = (int(br),) * len(xs) if np.isscalar(br) else tuple(int(b) for b in br)
        object.__setattr__(self, "x_levels", xs)
        object.__setattr__(self, "q_levels", qs)
        object.__setattr__(self, "branching", br)
        k = len(xs)
        if k < 1 or len(qs) != k or len(br) != k:
            raise RostError("x_levels, q_levels and branching need one entry per level")
        if not (0 < xs[0] and xs[-1] < 1 and all(a < b for a, b in zip(xs, xs[1:]))):
            raise RostError(f"x_levels must increase strictly inside (0, 1): {xs}")
        if not (0 <= qs[0] and qs[-1] < 1 and all(a < b for a, b in zip(qs, qs[1:]))):
            raise RostError(f"q_levels must increase strictly inside [0, 1): {qs}")
        if min(br) < 2:
            raise RostError("branching must be at least 2 at every level")
        if self.keep is not None and self.keep < 1:
            raise RostError("keep must be positive")

    @property
    def k(self) -> int:
        return len(self.x_levels)

    @property
    def n_leaves(self) -> int:
        return prod(self.branching)

    def x_of_q(self, q: float) -> float:
        """Right-continuous step function: 0 below q_1, x_l on [q_l, q_{l+1}), 1 at q >= 1."""
        if q >= 1.0:
            return 1.0
        idx = np.searchsorted(self.q_levels, q, side="right")
        return 0.0 if idx == 0 else self.x_levels[idx - 1]

    def to_dict(self) -> dict:
        return {"x_levels": list(self.x_levels), "q_levels": list(self.q_levels),
                "branching": list(self.branching), "keep": self.keep}


@dataclass(frozen=True)
class CascadeTree:
    """Realised cascade.

    ``node_atoms[l]`` has shape (nodes at depth l, M_{l+1}); row-major node
    numbering.  ``leaf_addresses[i]`` is the path of the rank-``i`` stored
    leaf and ``level_partitions[l][i]`` its block label at depth ``l``.
    """

    spec: RpcSpec
    node_atoms: tuple[np.ndarray, ...]
    leaf_products: np.ndarray
    leaf_index: np.ndarray
    leaf_addresses: np.ndarray
    level_partitions: tuple[np.ndarray, ...]

    def split_level(self, i: int, j: int) -> int:
        """l(i, j): deepest level at which ranks i and j share a block."""
        if i == j:
            return self.spec.k
        a, b = self.leaf_addresses[i], self.leaf_addresses[j]
        neq = np.flatnonzero(a != b)
        return int(neq[0])

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "node_atoms": [a.tolist() for a in self.node_atoms],
            "leaf_addresses": self.leaf_addresses.tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CascadeTree":
        doc = json.loads(text)
        s = doc["spec"]
        spec = RpcSpec(tuple(s["x_levels"]), tuple(s["q_levels"]), tuple(s["branching"]), s.get("keep"))
        atoms = tuple(np.array(a, dtype=float).reshape(-1, m) for a, m in zip(doc["node_atoms"], spec.branching))
        products = _leaf_products(atoms)
        addr = np.array(doc["leaf_addresses"], dtype=np.int64).reshape(-1, spec.k)
        index = np.ravel_multi_index(addr.T, spec.branching) if addr.size else np.zeros(0, np.int64)
        parts = _partitions(index, spec.branching)
        return cls(spec, atoms, products, index, addr, parts)


def _leaf_products(node_atoms) -> np.ndarray:
    w = np.ones(1)
    for atoms in node_atoms:
        w = (w[:, None] * atoms).ravel()
    return w


def _partitions(leaf_index: np.ndarray, branching) -> tuple[np.ndarray, ...]:
    k = len(branching)
    parts = []
    for l in range(k + 1):
        below = prod(branching[l:])
        parts.append(leaf_index // below)
    return tuple(parts)


def stable_moment(x: float, p: float) -> float:
    """E[S^p] for S the sum of a Poisson process with intensity x s^(-x-1) ds, p < x."""
    if not p < x:
        raise RostError(f"moment {p} of a {x}-stable total is infinite")
    return gamma(1 - p / x) / gamma(1 - p) * gamma(1 - x) ** (p / x)


def subtree_scales(x_levels) -> list[float]:
    """Typical-size multipliers for unstored subtrees hanging below each depth.

    Entry ``l`` is the factor C with which the Poisson tail of a depth-``l``
    node is inflated to account for the random total mass of the subtrees
    carried by its unstored children: C = E[Z^x]^(1/x) with Z the total mass
    of one child subtree and x the node's tail index.  At the deepest level
    children are leaves and C = 1.
    """
    k = len(x_levels)
    scales = [1.0] * k
    z_scale = 1.0  # Z_{l+1} =d z_scale * S_{x_{l+2}}
    for l in range(k - 2, -1, -1):
        x_here = x_levels[l]
        x_child = x_levels[l + 1]
        mom = z_scale ** x_here * stable_moment(x_child, x_here)
        scales[l] = mom ** (1.0 / x_here)
        z_scale = scales[l]
    return scales


def sample_rpc(spec: RpcSpec, rng: np.random.Generator) -> tuple[Rost, CascadeTree]:
    """Sample a finite cascade and return the ranked ROSt plus the tree."""
    if spec.n_leaves > spec.leaf_budget:
        raise RostError(f"{spec.n_leaves} leaves exceed the leaf budget {spec.leaf_budget}")
    k = spec.k
    scales = subtree_scales(spec.x_levels)
    node_atoms = []
    # path product at each node and residual (unstored) mass in absolute units
    prefix = np.ones(1)
    dust_abs = []
    for l in range(k):
        m = spec.branching[l]
        atoms = np.stack([sample_power_tail_poisson(spec.x_levels[l], m, rng) for _ in range(prefix.size)])
        node_atoms.append(atoms)
        tail = remainder_mean(spec.x_levels[l], atoms[:, -1])
        dust_abs.append(prefix * tail * scales[l])
        prefix = (prefix[:, None] * atoms).ravel()
    leaves = prefix
    n_all = leaves.size
    keep = n_all if spec.keep is None else min(spec.keep, n_all)
    order = np.argsort(-leaves, kind="stable")
    kept, dropped = order[:keep], order[keep:]
    parent_width = spec.branching[-1]
    dust_abs[-1] = dust_abs[-1] + np.bincount(dropped // parent_width, weights=leaves[dropped],
                                              minlength=dust_abs[-1].size)
    total = float(leaves[kept].sum() + sum(d.sum() for d in dust_abs))
    dust = tuple(d / total for d in dust_abs)
    parts = _partitions(kept, spec.branching)
    addresses = np.stack(np.unravel_index(kept, spec.branching), axis=1) if k else np.zeros((keep, 0))
    parents = tuple(
        np.zeros(0, np.int64) if l == 0 else np.arange(dust[l].size) // spec.branching[l - 1]
        for l in range(k)
    )
    h = Hierarchy(np.stack(parts[:k], axis=1), np.array(spec.q_levels), parents, dust)
    mp = MassPartition(
        leaves[kept] / total,
        truncation_count=keep,
        remainder_mass=float(sum(d.sum() for d in dust)),
        normalizer=total,
        tail_index=spec.x_levels[-1],
    )
    tree = CascadeTree(spec, tuple(node_atoms), leaves, kept, addresses.astype(np.int64), parts)
    return Rost(mp, hierarchy=h), tree


def node_increment_variances(q_levels, r: int) -> np.ndarray:
    """Variances q_{l+1}^r - q_l^r for l = 0..k with q_0 = 0 and q_{k+1} = 1."""
    qr = np.concatenate([[0.0], np.asarray(q_levels, float) ** r, [1.0]])
    return np.diff(qr)


def node_fields(h: Hierarchy, r: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Accumulated field value at every internal node, depth by depth."""
    var = node_increment_variances(h.q_levels, r)
    out = []
    for l in range(h.depth):
        n_l = h.n_nodes[l]
        inc = np.sqrt(var[l]) * rng.standard_normal(n_l)
        if l > 0:
            inc = inc + out[l - 1][h.parents[l]]
        out.append(inc)
    return out


def tree_field_from_nodes(h: Hierarchy, nodes: list[np.ndarray], r: int, rng: np.random.Generator) -> np.ndarray:
    var_leaf = node_increment_variances(h.q_levels, r)[-1]
    deepest = nodes[-1][h.labels[:, -1]]
    return deepest + np.sqrt(var_leaf) * rng.standard_normal(h.labels.shape[0])


def tree_gaussian_field(tree_or_rost, q_levels=None, r: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-leaf Gaussian values with covariance Q^{*r}, built from node increments.

    Accepts either a :class:`CascadeTree` (field for its stored leaves in
    rank order) or a :class:`Rost` carrying a hierarchy.
    """
    if isinstance(r, bool) or int(r) != r or r < 1:
        raise RostError(f"power r must be a positive integer, got {r}")
    if rng is None:
        raise RostError("tree_gaussian_field needs a random generator")
    if isinstance(tree_or_rost, CascadeTree):
        t = tree_or_rost
        ql = t.spec.q_levels if q_levels is None else q_levels
        k = t.spec.k
        parents = tuple(
            np.zeros(0, np.int64) if l == 0 else np.arange(prod(t.spec.branching[:l])) // t.spec.branching[l - 1]
            for l in range(k)
        )
        dust = tuple(np.zeros(prod(t.spec.branching[:l])) for l in range(k))
        h = Hierarchy(np.stack(t.level_partitions[:k], axis=1), np.array(ql), parents, dust)
    else:
        h = tree_or_rost.hierarchy
        if h is None:
            raise RostError("ROSt has no hierarchy; use the dense sampler")
        if q_levels is not None:
            h = Hierarchy(h.labels, np.array(q_levels), h.parents, h.dust)
    nodes = node_fields(h, int(r), rng)
    return tree_field_from_nodes(h, nodes, int(r), rng)


def pd_rost(mp: MassPartition, q: float = 0.0) -> Rost:
    """One-level ROSt: a mass-partition with constant off-diagonal overlap ``q``.

    The remainder is carried as residual mass of the single root node, so
    the overlap matrix is never materialised unless requested.
    """
    n = len(mp)
    h = Hierarchy(np.zeros((n, 1), np.int64), np.array([float(q)]), (np.zeros(0, np.int64),),
                  (np.array([mp.remainder_mass]),))
    return Rost(mp, hierarchy=h)
