"""Monte-Carlo tests of invariance and limit statements.

Two-sample comparisons use the sup-distance between empirical distribution
functions with permutation p-values.  Discrete per-level overlap masses use
a chi-square-style mean-difference statistic, also calibrated by
permutation.  Before and after samples are always independent draws.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from math import factorial
from itertools import permutations
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .errors import RostError
from .evolution import EvolutionConfig, PsiModel, evolve, evolve_partition_free, g_moment
from .overlap import Rost, overlap_histogram
from .pointproc import sample_pd, sample_power_tail_poisson
from .rpc import pd_rost
from .streams import SPLIT_RULE, map_replicas, replica_rng

SCHEMA_VERSION = "1.0"
QS_MIN_REPLICAS = 200
MIN_REPLICAS = 50
N_PERMUTATIONS = 1000


# -- report ---------------------------------------------------------------------


@dataclass
class StatResult:
    name: str
    distance: float
    p_value: float
    p_adjusted: float | None = None
    reject: bool | None = None
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise RostError(f"p-value {self.p_value} outside [0, 1]")


@dataclass
class QsReport:
    """Outcome of one test: per-statistic results, verdict and provenance of randomness."""

    test: str
    statistics: list[StatResult]
    replicas: int
    significance: float
    passed: bool
    seeds: dict
    min_replicas: int = MIN_REPLICAS
    details: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replicas < self.min_replicas:
            raise RostError(f"{self.replicas} replicas below the minimum {self.min_replicas}")

    @property
    def corrected_alpha(self) -> float:
        return self.significance / max(1, len(self.statistics))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["corrected_alpha"] = self.corrected_alpha
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "distance", "p_value"])
        for s in self.statistics:
            w.writerow([s.name, repr(float(s.distance)), repr(float(s.p_value))])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _seeds(root_seed: int, streams: Sequence[str]) -> dict:
    return {"root_seed": int(root_seed), "streams": list(streams), "split_rule": SPLIT_RULE}


def _summary(a: np.ndarray) -> dict:
    a = np.asarray(a, float)
    if a.ndim > 1:
        return {"mean": a.mean(axis=0).tolist(), "sd": a.std(axis=0, ddof=1).tolist(), "n": int(a.shape[0])}
    return {"mean": float(a.mean()), "sd": float(a.std(ddof=1)), "n": int(a.size)}


# -- two-sample machinery -------------------------------------------------------


def _ks_from_labels(sorted_labels: np.ndarray, last_of_tie: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Sup-distance for label rows (B, n) already in pooled sorted order."""
    c1 = np.cumsum(sorted_labels, axis=-1)
    pos = np.arange(1, sorted_labels.shape[-1] + 1)
    diff = np.abs(c1 / n1 - (pos - c1) / n2)
    return diff[..., last_of_tie].max(axis=-1)


def ks_permutation_test(a, b, rng: np.random.Generator, n_perm: int = N_PERMUTATIONS) -> tuple[float, float]:
    """Two-sample sup-distance with p = (1 + #{D* >= D}) / (1 + B)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="stable")
    sp = pooled[order]
    last = np.append(sp[1:] != sp[:-1], True)
    labels = np.zeros(n1 + n2)
    labels[:n1] = 1.0
    d_obs = float(_ks_from_labels(labels[order], last, n1, n2))
    ge = 0
    chunk = max(1, 2_000_000 // (n1 + n2))
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perm = rng.permuted(np.tile(labels, (m, 1)), axis=1)
        ge += int(np.count_nonzero(_ks_from_labels(perm, last, n1, n2) >= d_obs - 1e-12))
        done += m
    return d_obs, (1 + ge) / (1 + n_perm)


def _chi2_stat(x: np.ndarray, labels: np.ndarray, n1: int, n2: int, scale: np.ndarray) -> np.ndarray:
    m1 = labels @ x / n1
    m2 = (1.0 - labels) @ x / n2
    return np.sum((m1 - m2) ** 2 / scale, axis=-1)


def level_mass_permutation_test(a, b, rng: np.random.Generator, n_perm: int = N_PERMUTATIONS) -> tuple[float, float]:
    """Chi-square-style comparison of mean per-level masses, permutation p-value.

    Levels with no variation in the pooled sample carry no information and
    are dropped; if none remain the p-value is 1.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    pooled = np.vstack([a, b])
    n1, n2 = a.shape[0], b.shape[0]
    var = pooled.var(axis=0, ddof=1)
    keep = var > 1e-300
    if not keep.any():
        return 0.0, 1.0
    x = pooled[:, keep]
    scale = var[keep] * (1.0 / n1 + 1.0 / n2)
    labels = np.zeros(n1 + n2)
    labels[:n1] = 1.0
    s_obs = float(_chi2_stat(x, labels, n1, n2, scale))
    ge = 0
    done = 0
    chunk = 200
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perm = rng.permuted(np.tile(labels, (m, 1)), axis=1)
        ge += int(np.count_nonzero(_chi2_stat(x, perm, n1, n2, scale) >= s_obs - 1e-12))
        done += m
    return s_obs, (1 + ge) / (1 + n_perm)


# -- statistic family -----------------------------------------------------------


def _level_masses(r: Rost, levels: np.ndarray | None) -> np.ndarray:
    hist = overlap_histogram(r)
    if levels is None:
        return hist.masses
    out = np.zeros(levels.size)
    for v, m in zip(hist.values, hist.masses):
        j = int(np.argmin(np.abs(levels - v)))
        out[j] += m
    return out


STATISTICS: dict[str, str] = {
    "xi1": "scalar",
    "xi2": "scalar",
    "xi3": "scalar",
    "gap_ratio": "scalar",
    "overlap_levels": "levels",
}


def compute_statistic(name: str, r: Rost, levels: np.ndarray | None = None):
    w = r.xi.weights
    if name.startswith("xi") and name[2:].isdigit():
        m = int(name[2:])
        return float(w[m - 1]) if w.size >= m else 0.0
    if name == "gap_ratio":
        return float(w[1] / w[0]) if w.size >= 2 else 0.0
    if name == "overlap_levels":
        return _level_masses(r, levels)
    raise RostError(f"unknown statistic {name!r}; registered: {sorted(STATISTICS)}")


def _compare(name: str, before, after, rng) -> StatResult:
    if name == "overlap_levels":
        d, p = level_mass_permutation_test(np.array(before), np.array(after), rng)
    else:
        d, p = ks_permutation_test(before, after, rng)
    return StatResult(name, d, p, before=_summary(np.array(before)), after=_summary(np.array(after)))


def _bonferroni(results: list[StatResult], significance: float) -> bool:
    m = len(results)
    for s in results:
        s.p_adjusted = min(1.0, s.p_value * m)
        s.reject = s.p_value < significance / m
    return not any(s.reject for s in results)


# -- tests ----------------------------------------------------------------------


def qs_test(
    sampler: Callable[[np.random.Generator], Rost],
    cfg: EvolutionConfig,
    n_replicas: int,
    statistics: Sequence[str] = ("xi1", "gap_ratio", "overlap_levels"),
    significance: float = 0.01,
    seed: int = 0,
    threads: int = 1,
    levels: Sequence[float] | None = None,
    tag: str = "qs",
) -> QsReport:
    """Compare fresh samples with independently sampled-then-evolved ones."""
    if n_replicas < QS_MIN_REPLICAS:
        raise RostError(f"qs_test needs at least {QS_MIN_REPLICAS} replicas, got {n_replicas}")
    for s in statistics:
        if s not in STATISTICS:
            raise RostError(f"unknown statistic {s!r}; registered: {sorted(STATISTICS)}")
    lv = None if levels is None else np.asarray(levels, float)
    streams = (f"{tag}/before", f"{tag}/after-sample", f"{tag}/after-evolve", f"{tag}/permutation")

    def before(i):
        r = sampler(replica_rng(seed, streams[0], i))
        return [compute_statistic(s, r, lv) for s in statistics], r.xi.remainder_mass

    def after(i):
        r = sampler(replica_rng(seed, streams[1], i))
        res = evolve(r, cfg, replica_rng(seed, streams[2], i))
        return [compute_statistic(s, res.evolved, lv) for s in statistics], res.evolved.xi.remainder_mass

    b = map_replicas(before, n_replicas, threads)
    a = map_replicas(after, n_replicas, threads)
    prng = replica_rng(seed, streams[3], 0)
    results = []
    for j, s in enumerate(statistics):
        results.append(_compare(s, [x[0][j] for x in b], [x[0][j] for x in a], prng))
    passed = _bonferroni(results, significance)
    rem_b = np.array([x[1] for x in b])
    rem_a = np.array([x[1] for x in a])
    details = {
        "psi": cfg.psi.name,
        "r": repr(cfg.r) if cfg.free else int(cfg.r),
        "steps": cfg.steps,
        "mean_remainder_before": float(rem_b.mean()),
        "mean_remainder_after": float(rem_a.mean()),
        "max_remainder_before": float(rem_b.max()),
    }
    return QsReport("qs-test", results, n_replicas, significance, passed, _seeds(seed, streams),
                    min_replicas=QS_MIN_REPLICAS, details=details)


def tilted_cdf(psi: PsiModel, x: float) -> Callable[[np.ndarray], np.ndarray]:
    """CDF of the law with density exp(x psi(z)) phi(z) / g(x)."""
    if psi.kind == "linear" and psi.norm == 1.0:
        mu = x * psi.scale
        return lambda z: stats.norm.cdf(z, loc=mu)
    g = g_moment(psi, x)
    grid = np.linspace(-12.0, 12.0, 48001)
    dens = np.exp(x * psi(grid)) * stats.norm.pdf(grid) / g
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    return lambda z: np.interp(z, grid, cdf)


def tilted_sampler(psi: PsiModel, x: float) -> Callable[[tuple, np.random.Generator], np.ndarray]:
    """Inverse-CDF sampler for the tilted law."""
    if psi.kind == "linear" and psi.norm == 1.0:
        mu = x * psi.scale
        return lambda size, rng: mu + rng.standard_normal(size)
    g = g_moment(psi, x)
    grid = np.linspace(-12.0, 12.0, 48001)
    dens = np.exp(x * psi(grid)) * stats.norm.pdf(grid) / g
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    return lambda size, rng: np.interp(rng.random(size), cdf, grid)


def increment_tilt_test(
    x: float,
    psi: PsiModel,
    n_replicas: int,
    significance: float = 0.01,
    seed: int = 0,
    n_atoms: int = 1000,
    threads: int = 1,
) -> QsReport:
    """Field value of the post-step leader versus the tilted law e^{x psi} phi / g(x)."""
    stream = "tilt/evolve"

    def one(i):
        rng = replica_rng(seed, stream, i)
        mp = sample_pd(x, n_atoms, rng)
        _, origin, hist = evolve_partition_free(mp, psi, 1, rng, track=True)
        return hist[0, origin[0]]

    z = np.array(map_replicas(one, n_replicas, threads))
    res = stats.kstest(z, tilted_cdf(psi, x))
    sr = StatResult("leader_increment", float(res.statistic), float(res.pvalue), before=_summary(z))
    passed = _bonferroni([sr], significance)
    details = {"x": x, "psi": psi.name, "n_atoms": n_atoms, "sample_mean": float(z.mean()),
               "sample_var": float(z.var(ddof=1))}
    return QsReport("tilt-test", [sr], n_replicas, significance, passed, _seeds(seed, [stream]), details=details)


@dataclass(frozen=True)
class OrderingEstimate:
    steps: int
    probs: np.ndarray  # over permutations of the top atoms, identity first
    tv_distance: float
    stderr: float
    p_preserved: float
    p_stderr: float


def _ordering_index(n_top: int) -> dict:
    return {p: i for i, p in enumerate(permutations(range(n_top)))}


def _estimate_orderings(codes: np.ndarray, n_top: int, steps: int, rng: np.random.Generator) -> OrderingEstimate:
    k = factorial(n_top)
    n = codes.size
    counts = np.bincount(codes, minlength=k)
    p = counts / n
    tv = 0.5 * float(np.abs(p - 1.0 / k).sum())
    boot = rng.multinomial(n, p, size=400) / n
    se = float(np.std(0.5 * np.abs(boot - 1.0 / k).sum(axis=1), ddof=1))
    pp = float(p[0])
    return OrderingEstimate(steps, p, tv, se, pp, float(np.sqrt(pp * (1 - pp) / n)))


def ancestor_orderings_past(x, psi, n_top, steps, n_replicas, rng) -> np.ndarray:
    """Ordering codes of the ancestors of the current top atoms.

    The current partition is PD(x, 0) and the accumulated past increments of
    its atoms are i.i.d. sums of ``steps`` draws from the tilted law,
    independent of the partition; ancestors rank by xi_i exp(-S_i).
    """
    index = _ordering_index(n_top)
    logxi = np.empty((n_replicas, n_top))
    for i in range(n_replicas):
        logxi[i] = np.log(sample_power_tail_poisson(x, n_top, rng))
    if steps == 0:
        s = np.zeros((n_replicas, n_top))
    elif psi.kind == "linear" and psi.norm == 1.0:
        lam = psi.scale
        s = lam * (steps * x * lam + np.sqrt(steps) * rng.standard_normal((n_replicas, n_top)))
    else:
        draw = tilted_sampler(psi, x)
        s = np.zeros((n_replicas, n_top))
        chunk = max(1, 2_000_000 // max(1, n_top * n_replicas))
        done = 0
        while done < steps:
            m = min(chunk, steps - done)
            s += psi(draw((m, n_replicas, n_top), rng)).sum(axis=0)
            done += m
    anc = logxi - s
    ranks = np.argsort(-anc, axis=1, kind="stable")
    # code = which permutation maps current ranks to ancestor ranks
    return np.array([index[tuple(np.argsort(row))] for row in ranks])


def ancestor_orderings_forward(x, psi, n_top, steps, n_replicas, rng, n_atoms=500) -> np.ndarray:
    index = _ordering_index(n_top)
    codes = np.empty(n_replicas, dtype=np.int64)
    for i in range(n_replicas):
        mp = sample_pd(x, n_atoms, rng)
        if steps == 0:
            origin = np.arange(n_atoms)
        else:
            _, origin, _ = evolve_partition_free(mp, psi, steps, rng, track=True)
        top = origin[:n_top]
        codes[i] = index[tuple(np.argsort(np.argsort(top)))]
    return codes


def permutation_uniformity_test(
    x: float,
    psi: PsiModel,
    n_top: int,
    steps: Sequence[int],
    n_replicas: int,
    seed: int = 0,
    mode: str = "past",
    n_atoms: int = 500,
    significance: float = 0.01,
    target_tol: float | None = None,
) -> QsReport:
    """Law of the ancestors' ordering for the current top atoms, as T grows.

    The verdict requires that no step in the trend increases the
    total-variation distance by more than two standard errors of the
    difference and that the first distance exceeds the last by more than two
    standard errors.  With ``target_tol`` the largest T must additionally
    satisfy |P(order preserved) - 1/n_top!| < target_tol.
    """
    if n_top not in (2, 3):
        raise RostError("n_top must be 2 or 3")
    if mode not in ("past", "forward"):
        raise RostError(f"unknown mode {mode!r}")
    steps = [int(t) for t in steps]
    estimates = []
    streams = []
    for t in steps:
        stream = f"uniformity/{mode}/T={t}"
        streams.append(stream)
        rng = replica_rng(seed, stream, 0)
        if mode == "past":
            codes = ancestor_orderings_past(x, psi, n_top, t, n_replicas, rng)
        else:
            codes = ancestor_orderings_forward(x, psi, n_top, t, n_replicas, rng, n_atoms)
        estimates.append(_estimate_orderings(codes, n_top, t, rng))
    trend_ok = True
    for e0, e1 in zip(estimates, estimates[1:]):
        if e1.tv_distance > e0.tv_distance + 2.0 * np.hypot(e0.stderr, e1.stderr):
            trend_ok = False
    if len(estimates) > 1:
        first, last = estimates[0], estimates[-1]
        decreasing = first.tv_distance - last.tv_distance > 2.0 * np.hypot(first.stderr, last.stderr)
    else:
        decreasing = True
    limit_ok = True
    if target_tol is not None:
        limit_ok = abs(estimates[-1].p_preserved - 1.0 / factorial(n_top)) < target_tol
    results = [StatResult(f"tv[T={e.steps}]", e.tv_distance, 1.0) for e in estimates]
    for s in results:
        s.p_adjusted, s.reject = 1.0, False
    table = [{"T": e.steps, "tv_distance": e.tv_distance, "stderr": e.stderr} for e in estimates]
    details = {
        "mode": mode, "x": x, "psi": psi.name, "n_top": n_top,
        "p_preserved": [e.p_preserved for e in estimates],
        "p_preserved_stderr": [e.p_stderr for e in estimates],
        "ordering_probs": [e.probs.tolist() for e in estimates],
        "trend_nonincreasing": trend_ok, "trend_decreasing": bool(decreasing), "limit_ok": bool(limit_ok),
        "target_tol": target_tol,
    }
    return QsReport("uniformity-test", results, n_replicas, significance,
                    bool(trend_ok and decreasing and limit_ok), _seeds(seed, streams),
                    details=details, tables={"trend": table})


def escape_bound(psi: PsiModel, lam: float, steps: int, delta: float, tail_mass: float) -> float:
    """(1/delta) (g(2 lam) g(-2 lam))^{T/2} * tail_mass, with g the moments of psi."""
    gg = g_moment(psi, 2.0 * lam) * g_moment(psi, -2.0 * lam)
    val = (gg ** (steps / 2.0)) * tail_mass / delta
    if not np.isfinite(val):
        raise RostError("escape bound is numerically infinite")
    return float(val)


def escape_bound_check(
    sampler: Callable[[np.random.Generator], Rost],
    n_cut: int,
    steps: int,
    lam: float,
    delta: float,
    psi: PsiModel,
    r,
    n_replicas: int,
    seed: int = 0,
    threads: int = 1,
) -> QsReport:
    """Probability that an atom ranked beyond ``n_cut`` holds more than ``delta`` after T steps."""
    scaled = replace(psi, scale=psi.scale * lam, shift=psi.shift * lam)
    cfg = EvolutionConfig(scaled, r=r, steps=steps)
    stream = f"escape/N={n_cut}/T={steps}/lam={lam:g}/delta={delta:g}"

    def one(i):
        rng = replica_rng(seed, stream, i)
        rost = sampler(rng)
        if rost.n <= n_cut:
            raise RostError(f"sampler stores {rost.n} atoms, need more than {n_cut}")
        tail = float(rost.xi.weights[n_cut:].sum() + rost.xi.remainder_mass)
        res = evolve(rost, cfg, rng)
        w = res.evolved.xi.weights
        hit = bool(np.any((w > delta) & (res.origin >= n_cut)))
        return hit, tail

    out = map_replicas(one, n_replicas, threads)
    hits = np.array([o[0] for o in out], float)
    tails = np.array([o[1] for o in out])
    p_hat = float(hits.mean())
    se = float(np.sqrt(max(p_hat * (1 - p_hat), 1.0 / n_replicas) / n_replicas))
    bound = escape_bound(psi, lam, steps, delta, float(tails.mean()))
    ok = p_hat <= bound + 3.0 * se
    sr = StatResult("escape_probability", p_hat, 1.0, p_adjusted=1.0, reject=not ok)
    details = {"N": n_cut, "T": steps, "lambda": lam, "delta": delta, "empirical": p_hat, "stderr": se,
               "bound": bound, "tail_mass": float(tails.mean())}
    return QsReport("escape-bound", [sr], n_replicas, 0.0, bool(ok), _seeds(seed, [stream]), details=details)


def pd_sampler(x: float, n_atoms: int, q: float = 0.0) -> Callable[[np.random.Generator], Rost]:
    return lambda rng: pd_rost(sample_pd(x, n_atoms, rng), q)
