"""Finite-volume Gibbs kernels and checks of the specification axioms.

A *kernel recipe* is any object with a ``kernel(region, boundary)`` method
returning the law of the spins in ``region`` given the exterior
configuration ``boundary`` as a :class:`FiniteMeasure`.  Recipes with finite
range also provide ``dependence(region)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from .lattice import (
    Interaction,
    LocalFunction,
    Region,
    TailedConfiguration,
    all_minus,
    all_plus,
    config_index,
    configurations,
    cube,
    from_values,
    neighbours,
    outer_boundary,
    splice,
    splice_values,
)

DEFAULT_STATE_CAP = 2**24


@dataclass(frozen=True)
class FiniteMeasure:
    """Probability vector over the configurations of ``support`` (canonical order)."""

    support: Region
    probabilities: np.ndarray = field(compare=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float).copy()
        if p.shape != (2 ** len(self.support),):
            raise ValueError("one probability per configuration required")
        if np.any(p < 0):
            raise ValueError("negative probability")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def normalized(cls, support: Region, weights) -> "FiniteMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(support, w / w.sum())

    @classmethod
    def from_log_weights(cls, support: Region, logw) -> "FiniteMeasure":
        logw = np.asarray(logw, dtype=float)
        w = np.exp(logw - logw.max())
        return cls(support, w / w.sum())

    @classmethod
    def point_mass(cls, support: Region, spins) -> "FiniteMeasure":
        p = np.zeros(2 ** len(support))
        p[config_index(np.asarray(spins))] = 1.0
        return cls(support, p)

    @classmethod
    def product(cls, support: Region, p_plus) -> "FiniteMeasure":
        """Independent spins with P(+1) = ``p_plus`` (scalar or per site)."""
        q = np.broadcast_to(np.asarray(p_plus, dtype=float), (len(support),))
        cfg = configurations(len(support))
        probs = np.prod(np.where(cfg > 0, q, 1.0 - q), axis=1) if len(support) else np.ones(1)
        return cls(support, probs / probs.sum())

    @classmethod
    def uniform(cls, support: Region) -> "FiniteMeasure":
        n = 2 ** len(support)
        return cls(support, np.full(n, 1.0 / n))

    def marginal(self, region: Region) -> "FiniteMeasure":
        if region == self.support:
            return self
        pos = self.support.positions(region)
        idx = config_index(configurations(len(self.support))[:, pos])
        out = np.bincount(idx, weights=self.probabilities, minlength=2 ** len(region))
        return FiniteMeasure(region, out / out.sum())

    def expect(self, f: LocalFunction) -> float:
        vals = f.on(self.support, configurations(len(self.support)))
        return float(np.dot(self.probabilities, vals))

    def probability(self, event: LocalFunction) -> float:
        """Mass of a 0/1 event, normalized over the event and its complement."""
        mask = event.on(self.support, configurations(len(self.support))) > 0.5
        inside = math.fsum(self.probabilities[mask])
        outside = math.fsum(self.probabilities[~mask])
        return inside / (inside + outside)


def total_variation(a: FiniteMeasure, b: FiniteMeasure) -> float:
    if a.support != b.support:
        raise ValueError("measures live on different regions")
    return 0.5 * float(np.abs(a.probabilities - b.probabilities).sum())


# --- Boltzmann weights ------------------------------------------------------


@lru_cache(maxsize=256)
def _geometry(region: Region, dependence: Region):
    """Internal bonds of ``region`` and the adjacency to ``dependence`` sites."""
    pairs = [
        (i, region.position(y))
        for i, x in enumerate(region.sites)
        for y in neighbours(x)
        if y in region and region.position(y) > i
    ]
    adj = np.zeros((len(dependence), len(region)))
    for i, x in enumerate(region.sites):
        for y in neighbours(x):
            if y in dependence:
                adj[dependence.position(y), i] += 1.0
    pairs = np.array(pairs, dtype=int).reshape(-1, 2)
    return pairs, adj


def _log_weights(phi: Interaction, region: Region, dep_spins: np.ndarray) -> np.ndarray:
    """Boltzmann exponents, shape (n_rows, 2^|region|), for boundary rows ``dep_spins``."""
    dep = outer_boundary(region)
    pairs, adj = _geometry(region, dep)
    cfg = configurations(len(region)).astype(float)
    internal = phi.J * (cfg[:, pairs[:, 0]] * cfg[:, pairs[:, 1]]).sum(axis=1) if len(pairs) else 0.0
    internal = internal + phi.h * cfg.sum(axis=1)
    fields = phi.J * (np.atleast_2d(dep_spins).astype(float) @ adj)
    return phi.beta * (internal[None, :] + fields @ cfg.T)


def _normalize_rows(logw: np.ndarray) -> np.ndarray:
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def gibbs_kernel(phi: Interaction, region: Region, boundary: TailedConfiguration) -> FiniteMeasure:
    """Boltzmann law on ``region`` with exterior spins read from ``boundary``."""
    dep = outer_boundary(region)
    row = _normalize_rows(_log_weights(phi, region, boundary.restrict(dep)))[0]
    return FiniteMeasure(region, row)


@dataclass(frozen=True)
class KernelTable:
    """Rows gamma_Lambda(.|omega) indexed by configurations of the dependence set."""

    volume: Region
    dependence: Region
    rows: np.ndarray = field(compare=False)

    def __post_init__(self):
        if self.volume.intersection(self.dependence).sites:
            raise ValueError("dependence set must be disjoint from the volume")
        if self.rows.shape != (2 ** len(self.dependence), 2 ** len(self.volume)):
            raise ValueError("row table has the wrong shape")

    def row(self, boundary: TailedConfiguration) -> FiniteMeasure:
        i = int(config_index(boundary.restrict(self.dependence)))
        return FiniteMeasure(self.volume, self.rows[i])


@dataclass(frozen=True)
class GibbsSpecification:
    """The nearest-neighbour Ising specification on Z^d."""

    phi: Interaction
    d: int = 1

    def dependence(self, region: Region) -> Region:
        return outer_boundary(region)

    def kernel(self, region: Region, boundary: TailedConfiguration) -> FiniteMeasure:
        return gibbs_kernel(self.phi, region, boundary)

    def rows(self, region: Region, dep_spins: np.ndarray) -> np.ndarray:
        return _normalize_rows(_log_weights(self.phi, region, dep_spins))

    def filled_kernel(self, region: Region, omega: TailedConfiguration, M: int,
                      theta: TailedConfiguration) -> FiniteMeasure:
        """gamma_Lambda(.|omega on the cube of radius M, theta beyond)."""
        return self.kernel(region, splice(omega, theta, cube(M, self.d)))

    def table(self, region: Region) -> KernelTable:
        dep = self.dependence(region)
        return KernelTable(region, dep, self.rows(region, configurations(len(dep))))


# --- axioms -----------------------------------------------------------------


def kernel_probability(gamma, region: Region, event: LocalFunction, omega: TailedConfiguration) -> float:
    """gamma_Lambda(B | omega) for a 0/1 event B, evaluated on spliced configurations."""
    law = gamma.kernel(region, omega)
    win = region.union(event.support)
    outside = [x for x in win.sites if x not in region]
    spins = np.empty((2 ** len(region), len(win)), dtype=np.int8)
    spins[:, win.positions(region)] = configurations(len(region))
    if outside:
        spins[:, win.positions(Region.of(outside))] = omega.restrict(Region.of(outside))
    mask = event.on(win, spins) > 0.5
    inside = math.fsum(law.probabilities[mask])
    rest = math.fsum(law.probabilities[~mask])
    return inside / (inside + rest)


def properness_check(gamma, region: Region, event: LocalFunction, omega: TailedConfiguration) -> float:
    """|gamma_Lambda(B|omega) - 1_B(omega)| for an exterior event B."""
    if event.support.intersection(region).sites:
        raise ValueError("event reads spins inside the volume")
    return abs(kernel_probability(gamma, region, event, omega) - event(omega))


def compose(gamma, inner: Region, outer: Region, boundary: TailedConfiguration) -> FiniteMeasure:
    """(gamma_outer gamma_inner)(.|boundary) restricted to ``outer``, by exhaustive summation."""
    if not inner.issubset(outer):
        raise ValueError("inner volume must lie inside outer volume")
    big = gamma.kernel(outer, boundary)
    rest = outer.minus(inner)
    cfg = configurations(len(outer))
    pin, prest = outer.positions(inner), outer.positions(rest)
    out = np.zeros(2 ** len(outer))
    inner_cfg = configurations(len(inner))
    for t, p in enumerate(big.probabilities):
        if p == 0.0:
            continue
        ctx = splice_values(outer, cfg[t], boundary)
        row = gamma.kernel(inner, ctx).probabilities
        spins = np.empty((len(inner_cfg), len(outer)), dtype=np.int8)
        spins[:, pin] = inner_cfg
        spins[:, prest] = cfg[t, prest]
        np.add.at(out, config_index(spins), p * row)
    return FiniteMeasure(outer, out / out.sum())


def consistency_check(gamma, inner: Region, outer: Region, boundary: TailedConfiguration,
                      cap: int = DEFAULT_STATE_CAP) -> float:
    """Total variation between gamma_outer and gamma_outer gamma_inner at ``boundary``."""
    if 2 ** (len(outer) + len(inner)) > cap:
        raise ValueError("composite state space exceeds the enumeration cap")
    return total_variation(gamma.kernel(outer, boundary), compose(gamma, inner, outer, boundary))


@numba.njit(cache=True, fastmath=True)
def _composition_tv(big, row_of, ctx_rest, ctx_bnd, table, full_index):  # pragma: no cover - compiled
    nb = row_of.shape[0]
    nrest, nin = full_index.shape
    out = np.empty(nb)
    buf = np.empty(nin)
    for b in range(nb):
        p = big[row_of[b]]
        acc = 0.0
        for r in range(nrest):
            mass = 0.0
            idx = full_index[r]
            for s in range(nin):
                buf[s] = p[idx[s]]
                mass += buf[s]
            row = table[ctx_rest[r] + ctx_bnd[b]]
            for s in range(nin):
                acc += abs(buf[s] - mass * row[s])
        out[b] = 0.5 * acc
    return out


def row_labels(rows: np.ndarray) -> np.ndarray:
    """Integer labels equal exactly for bitwise-identical rows."""
    seen = {}
    return np.array([seen.setdefault(r.tobytes(), len(seen)) for r in rows], dtype=np.int64)


@lru_cache(maxsize=None)
def _consistency_geometry(inner: Region, outer: Region, dep_in: Region, dep_out: Region):
    """Index tables for a nested pair; they do not depend on the interaction."""
    rest = outer.minus(inner)
    rest_cfg = configurations(len(rest))
    in_cfg = configurations(len(inner))
    full = np.empty((len(rest_cfg), len(in_cfg), len(outer)), dtype=np.int8)
    full[:, :, outer.positions(inner)] = in_cfg[None, :, :]
    full[:, :, outer.positions(rest)] = rest_cfg[:, None, :]
    full_index = config_index(full)
    # the inner context index splits into bits read from rest and from the outer boundary
    m = len(dep_in)
    ctx_rest = np.zeros(len(rest_cfg), dtype=np.int64)
    ctx_bnd = np.zeros(2 ** len(dep_out), dtype=np.int64)
    bcfg = configurations(len(dep_out))
    for j, y in enumerate(dep_in.sites):
        w = 1 << (m - 1 - j)
        if y in rest:
            ctx_rest += w * (rest_cfg[:, rest.position(y)] > 0)
        else:
            ctx_bnd += w * (bcfg[:, dep_out.position(y)] > 0)
    return full_index, ctx_rest, ctx_bnd


def consistency_residuals(spec: GibbsSpecification, inner: Region, outer: Region,
                          outer_rows: np.ndarray | None = None,
                          inner_rows: np.ndarray | None = None,
                          row_id: np.ndarray | None = None) -> np.ndarray:
    """Consistency residual of a Gibbs specification for every boundary row of ``outer``.

    Row ``b`` is the ``b``-th configuration of the outer dependence set.  The
    inner kernel is read from its own table, never from the outer rows.
    ``outer_rows``/``inner_rows`` may pass precomputed ``spec.rows`` tables and
    ``row_id`` the labels of identical outer rows (see :func:`row_labels`).
    """
    dep_out = spec.dependence(outer)
    dep_in = spec.dependence(inner)
    big = spec.rows(outer, configurations(len(dep_out))) if outer_rows is None else outer_rows
    table = spec.rows(inner, configurations(len(dep_in))) if inner_rows is None else inner_rows
    full_index, ctx_rest, ctx_bnd = _consistency_geometry(inner, outer, dep_in, dep_out)
    # the residual is a function of (outer row, inner context): evaluate each distinct pair once
    if row_id is None:
        row_id = row_labels(big)
    pairs, inverse = np.unique(row_id * (2 ** len(dep_in)) + ctx_bnd, return_inverse=True)
    first = np.zeros(len(pairs), dtype=np.int64)
    first[inverse.ravel()[::-1]] = np.arange(len(ctx_bnd))[::-1]
    res = _composition_tv(big, first, ctx_rest, ctx_bnd[first], table, full_index)
    return res[inverse.ravel()]


def dlr_residual(mu: FiniteMeasure, gamma, region: Region) -> float:
    """Total variation between mu and mu gamma_Lambda on mu's window."""
    window = mu.support
    if not region.issubset(window):
        raise ValueError("volume must lie inside the window")
    dep = gamma.dependence(region)
    if not dep.issubset(window):
        raise ValueError("volume touches the window edge")
    rest = window.minus(region)
    cfg = configurations(len(window))
    rest_idx = config_index(cfg[:, window.positions(rest)]) if len(rest) else np.zeros(len(cfg), int)
    rest_mass = np.bincount(rest_idx, weights=mu.probabilities, minlength=2 ** len(rest))
    rows = gamma.rows(region, cfg[:, window.positions(dep)])
    inner_idx = config_index(cfg[:, window.positions(region)])
    composed = rest_mass[rest_idx] * rows[np.arange(len(cfg)), inner_idx]
    return 0.5 * float(np.abs(composed - mu.probabilities).sum())


def apply_kernel(mu: FiniteMeasure, gamma, region: Region) -> FiniteMeasure:
    """The composed measure mu gamma_Lambda on mu's window."""
    window = mu.support
    rest = window.minus(region)
    cfg = configurations(len(window))
    rest_idx = config_index(cfg[:, window.positions(rest)]) if len(rest) else np.zeros(len(cfg), int)
    rest_mass = np.bincount(rest_idx, weights=mu.probabilities, minlength=2 ** len(rest))
    rows = gamma.rows(region, cfg[:, window.positions(gamma.dependence(region))])
    inner_idx = config_index(cfg[:, window.positions(region)])
    out = rest_mass[rest_idx] * rows[np.arange(len(cfg)), inner_idx]
    return FiniteMeasure(window, out / out.sum())


# --- monotonicity -----------------------------------------------------------

UPSET_ENUMERATION_LIMIT = 5


@lru_cache(maxsize=8)
def upsets(k: int) -> np.ndarray:
    """All up-sets (increasing events) of {-1,+1}^k as a boolean matrix, shape (N, 2^k).

    Elements are decided top-down by number of plus spins; an element may
    join only when all its upper covers already have.
    """
    if k > UPSET_ENUMERATION_LIMIT:
        raise ValueError("up-set enumeration is limited to 5 sites")
    n = 2**k
    order = sorted(range(n), key=lambda x: -bin(x).count("1"))
    covers = [[x | (1 << j) for j in range(k) if not x & (1 << j)] for x in range(n)]
    found = []
    current = [False] * n

    def rec(i):
        if i == n:
            found.append(list(current))
            return
        x = order[i]
        rec(i + 1)
        if all(current[y] for y in covers[x]):
            current[x] = True
            rec(i + 1)
            current[x] = False

    rec(0)
    out = np.array(found, dtype=bool)
    out.setflags(write=False)
    return out


def _max_closure(weights: np.ndarray, k: int):
    """Up-set maximizing the total weight, by a minimum cut (exact for any k)."""
    import networkx as nx

    n = 2**k
    g = nx.DiGraph()
    g.add_node("s")
    g.add_node("t")
    scale = 1e15
    for x in range(n):
        w = weights[x]
        if w > 0:
            g.add_edge("s", x, capacity=w * scale)
        elif w < 0:
            g.add_edge(x, "t", capacity=-w * scale)
        for j in range(k):
            if not x & (1 << j):
                g.add_edge(x, x | (1 << j))  # infinite capacity
    _, (src_side, _) = nx.minimum_cut(g, "s", "t")
    mask = np.zeros(n, dtype=bool)
    for x in src_side:
        if x != "s":
            mask[x] = True
    return mask, float(weights[mask].sum())


def domination_violation(lower: np.ndarray, upper: np.ndarray, k: int):
    """Largest lower(A) - upper(A) over increasing events A, with the maximizing A."""
    diff = np.asarray(lower) - np.asarray(upper)
    if k <= UPSET_ENUMERATION_LIMIT:
        ups = upsets(k)
        vals = ups.astype(float) @ diff
        i = int(np.argmax(vals))
        return float(vals[i]), ups[i]
    mask, val = _max_closure(diff, k)
    return val, mask


@dataclass(frozen=True)
class MonotonicityVerdict:
    preserving: bool
    witness: tuple | None = None  # (event mask, lower boundary index, upper boundary index)
    violation: float = 0.0


def monotonicity_check(table: KernelTable, tol: float = 1e-12) -> MonotonicityVerdict:
    """Check gamma(A|omega) <= gamma(A|sigma) for all omega <= sigma and increasing A.

    Stochastic domination is transitive, so it suffices to test boundary rows
    differing by one spin flip from - to +.
    """
    k = len(table.volume)
    m = len(table.dependence)
    worst = MonotonicityVerdict(True)
    for lo in range(2**m):
        for j in range(m):
            bit = 1 << j
            if lo & bit:
                continue
            hi = lo | bit
            val, mask = domination_violation(table.rows[lo], table.rows[hi], k)
            if val > tol and val > worst.violation:
                worst = MonotonicityVerdict(False, (mask, lo, hi), val)
    return worst


def increasing_catalogue(region: Region) -> list:
    """Increasing local functions: single spins, all-plus indicators of sub-blocks, magnetization."""
    k = len(region)
    cfg = configurations(k)
    out = []
    for j in range(k):
        out.append(LocalFunction(region, (cfg[:, j] > 0).astype(float)))
    for size in range(2, k + 1):
        for start in range(0, k - size + 1):
            out.append(LocalFunction(region, np.all(cfg[:, start:start + size] > 0, axis=1).astype(float)))
    out.append(LocalFunction(region, cfg.sum(axis=1).astype(float)))
    if k <= 4:
        out.extend(LocalFunction(region, u.astype(float)) for u in upsets(k))
    return out


@dataclass(frozen=True)
class DirectionalResult:
    law: FiniteMeasure
    stabilized: bool


def directional_limit_kernel(gamma, region: Region, omega: TailedConfiguration, sign: int,
                             S: Region) -> DirectionalResult:
    """gamma_Lambda(.|omega_S (+/-)_{S^c}); stabilized once S covers the dependence set."""
    if not region.issubset(S):
        raise ValueError("S must contain the volume")
    fill = all_plus(omega.dim) if sign > 0 else all_minus(omega.dim)
    law = gamma.kernel(region, splice(omega, fill, S))
    dep = gamma.dependence(region) if hasattr(gamma, "dependence") else None
    stabilized = dep is not None and dep.issubset(S)
    return DirectionalResult(law, stabilized)


def boundary_configuration(dep: Region, spins, tail=None) -> TailedConfiguration:
    cfg = from_values(dep, spins)
    return cfg if tail is None else TailedConfiguration(dep, cfg.values, tail, cfg.dim)


@dataclass(frozen=True)
class AxiomSweep:
    pairs: int
    max_consistency: float
    properness_checks: int
    max_properness: float


def _properness_rows(rows: np.ndarray, dep_cfg: np.ndarray) -> float:
    """Worst |gamma(B|w) - 1_B(w)| over single-spin exterior events B and all rows w."""
    mass = rows.sum(axis=1)
    worst = 0.0
    for j in range(dep_cfg.shape[1]):
        ind = dep_cfg[:, j] > 0
        inside = np.where(ind, mass, 0.0)
        rest = np.where(ind, 0.0, mass)
        worst = max(worst, float(np.max(np.abs(inside / (inside + rest) - ind))))
    return worst


def axiom_sweep(spec: GibbsSpecification, volume: Region) -> AxiomSweep:
    """Properness and consistency over every nested pair of nonempty subvolumes, all boundary rows."""
    import itertools

    tables, labels = {}, {}
    subsets = [Region.of(S) for k in range(1, len(volume) + 1)
               for S in itertools.combinations(volume.sites, k)]
    worst_c, worst_p, pairs, checks = 0.0, 0.0, 0, 0
    for O in subsets:
        dcfg = configurations(len(spec.dependence(O)))
        tables[O] = spec.rows(O, dcfg)
        labels[O] = row_labels(tables[O])
        worst_p = max(worst_p, _properness_rows(tables[O], dcfg))
        checks += dcfg.size
    for O in subsets:
        for j in range(1, len(O) + 1):
            for I in itertools.combinations(O.sites, j):
                I = Region.of(I)
                r = consistency_residuals(spec, I, O, tables[O], tables[I], labels[O])
                worst_c = max(worst_c, float(r.max()))
                pairs += 1
    return AxiomSweep(pairs, worst_c, checks, worst_p)
