"""Continuity diagnostics: variations, directional deltas, bad sets and continuity rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .engines import MarkovChain1D
from .lattice import (
    LocalFunction,
    Region,
    TailedConfiguration,
    all_minus,
    all_plus,
    alternating,
    configurations,
    cube,
    from_values,
    periodic_tail,
    splice,
)
from .specification import FiniteMeasure

M_MAX = 10**6
N_MAX = 10**3


# --- the tail family and the counterexample function ------------------------


@lru_cache(maxsize=256)
def chi(m: int) -> TailedConfiguration:
    """chi^(m): +1 exactly at sites x = 1 mod (m + 2)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    p = m + 2
    pattern = np.full(p, -1, dtype=int)
    pattern[1] = 1
    return TailedConfiguration(Region(()), (), periodic_tail(pattern, f"chi{m}"), 1)


@dataclass(frozen=True)
class TailFamily:
    """Base configuration omega = all plus and tails chi^(m), m >= 1."""

    base: TailedConfiguration = field(default_factory=lambda: all_plus(1))
    m_max: int = M_MAX

    def chi(self, m: int) -> TailedConfiguration:
        if m > self.m_max:
            raise ValueError("m beyond the family truncation")
        return chi(m)

    @staticmethod
    def descriptor(m: int) -> dict:
        return {"period": m + 2, "plus_residue": 1}

    def member(self, n: int, m: int) -> TailedConfiguration:
        """omega on [-n, n], chi^(m) outside."""
        return splice(self.base, self.chi(m), cube(n, 1))

    def m_grid(self, count: int = 20) -> list:
        grid = np.unique(np.geomspace(1, self.m_max, count).round().astype(int))
        return [int(m) for m in grid]


def family_separation(m1: int, m2: int, n: int) -> int | None:
    """A site beyond [-n, n] where chi^(m1) and chi^(m2) differ (None if they agree there)."""
    p1, p2 = m1 + 2, m2 + 2
    for x in range(n + 1, n + 1 + p1 * p2):
        if (x % p1 == 1) != (x % p2 == 1):
            return x
    return None


_PATTERNS: dict = {}


def _pattern_array(tail) -> np.ndarray:
    key = id(tail.pattern)
    hit = _PATTERNS.get(key)
    if hit is None or hit[0] is not tail.pattern:
        hit = (tail.pattern, np.asarray(tail.pattern, dtype=np.int8))
        _PATTERNS[key] = hit
    return hit[1]


def _chi_period(tail) -> int | None:
    """m + 2 if the tail is chi^(m) for some m >= 1."""
    if tail.kind != "periodic" or len(tail.period) != 1:
        return None
    pat = _pattern_array(tail)
    P = len(pat)
    plus = np.flatnonzero(pat == 1)
    if len(plus) == 0:
        return None
    p = int(plus[1] - plus[0]) if len(plus) > 1 else P
    if p < 3 or P % p:
        return None
    if not np.array_equal(pat, np.where(np.arange(P) % p == 1, 1, -1)):
        return None
    return p


def _resolve(eta: TailedConfiguration):
    """Follow named tails to the final rule; returns (rule tail, sites handled by lookup)."""
    tail = eta.tail
    radius = eta.window.radius() if len(eta.window) else 0
    while tail.kind == "named":
        ref = tail.ref
        radius = max(radius, ref.window.radius() if len(ref.window) else 0)
        tail = ref.tail
    return tail, radius


def _match_radius_walk(eta: TailedConfiguration, p: int, radius: int) -> int | None:
    """n with eta = omega on [-n, n] and chi (period p) beyond, by site lookups."""
    # n is the largest k with eta = + on [-k, k]; one of +-(n+1) carries -1 under chi
    n = -1
    while eta.at((n + 1,)) == 1 and eta.at((-(n + 1),)) == 1:
        n += 1
        if n > radius + p:
            return None
    if n < 0:
        return None
    # beyond the windows eta follows its tail, already certified equal to chi
    for x in range(n + 1, radius + 1):
        for y in (x, -x):
            if eta.at((y,)) != (1 if y % p == 1 else -1):
                return None
    return n


def _match_radius(eta: TailedConfiguration, p: int, radius: int) -> int | None:
    """Array version of the walk for a window plus a chi tail."""
    # chi is never + at both +-k, so the all-plus radius stays inside the window
    xs = np.arange(-(radius + 1), radius + 2)
    chi_vals = np.where(xs % p == 1, 1, -1).astype(np.int8)
    vals = chi_vals.copy()
    if len(eta.window):
        w = np.fromiter((s[0] for s in eta.window.sites), dtype=np.int64, count=len(eta.window))
        vals[w + radius + 1] = eta.values
    c = radius + 1
    sym = (vals[c:] == 1) & (vals[c::-1] == 1)
    n = int(np.argmin(sym)) - 1
    if n < 0:
        return None
    outside = np.abs(xs) > n
    if not np.array_equal(vals[outside], chi_vals[outside]):
        return None
    return n


def counterexample_f(eta: TailedConfiguration, family: TailFamily | None = None,
                     n_max: int = N_MAX, m_max: int | None = None) -> float:
    """m / (n + m) if eta = omega on [-n, n] and chi^(m) outside, else 0."""
    family = family or TailFamily()
    m_max = family.m_max if m_max is None else m_max
    if eta.dim != 1:
        raise ValueError("the counterexample lives on Z")
    tail, radius = _resolve(eta)
    p = _chi_period(tail)
    if p is None:
        return 0.0
    m = p - 2
    if eta.tail.kind == "periodic":
        n = _match_radius(eta, p, radius)
    else:
        n = _match_radius_walk(eta, p, radius)
    if n is None:
        return 0.0
    if n > n_max or m > m_max:
        raise ValueError(f"match (n={n}, m={m}) outside the declared range")
    # a second match at n - 1 would need chi = +1 at both n and -n
    if n >= 1 and n % p == 1 and (-n) % p == 1:
        raise ValueError("ambiguous counterexample match")
    return m / (n + m)


# --- variation -----------------------------------------------------------------


@dataclass(frozen=True)
class VariationResult:
    value: float
    exact: bool
    probes: int


def kernel_function(gamma, region: Region, f: LocalFunction):
    """eta -> gamma_Lambda(f | eta), carrying the dependence set when known."""

    def F(eta):
        return gamma.kernel(region, eta).expect(f)

    F.dependence = gamma.dependence(region) if hasattr(gamma, "dependence") else None
    return F


def default_probes(d: int = 1, family: TailFamily | None = None, count: int = 20) -> list:
    probes = [all_plus(d), all_minus(d), alternating(d)]
    if d == 1:
        family = family or TailFamily()
        probes += [family.chi(m) for m in family.m_grid(count)]
    return probes


def variation_at(F, omega: TailedConfiguration, n: int, probes: list | None = None,
                 exact_cap: int = 16) -> VariationResult:
    """sup over exterior pairs of |F(omega_L sigma) - F(omega_L eta)|, L the cube of radius n.

    Exact when F declares a finite dependence set (all exterior configurations
    on it are enumerated); otherwise a lower bound over the probe set.
    """
    d = omega.dim
    vol = cube(n, d)
    if isinstance(F, LocalFunction):
        f = F
        F = lambda eta: f(eta)  # noqa: E731
        F.dependence = f.support
    dep = getattr(F, "dependence", None)
    if dep is not None:
        outside = dep.minus(vol)
        if len(outside) <= exact_cap:
            if not len(outside):
                return VariationResult(0.0, True, 1)
            vals = [F(splice(omega, splice_on(outside, c, omega), vol)) for c in configurations(len(outside))]
            return VariationResult(float(max(vals) - min(vals)), True, len(vals))
    probes = probes if probes is not None else default_probes(d)
    vals = [F(splice(omega, s, vol)) for s in probes]
    return VariationResult(float(max(vals) - min(vals)), False, len(vals))


def splice_on(region: Region, values, outer: TailedConfiguration) -> TailedConfiguration:
    return splice(from_values(region, values), outer, region)


# --- directional delta -------------------------------------------------------


@dataclass(frozen=True)
class DeltaResult:
    value: float
    reference: str  # "exact" or "M_ref=<k>"


def directional_delta(target, region: Region, M: int, f: LocalFunction | None,
                      theta: TailedConfiguration, omega: TailedConfiguration,
                      M_ref: int | None = None) -> DeltaResult:
    """|gamma^{M,theta}_Lambda(f)(omega) - gamma_Lambda(f)(omega)|.

    For a specification the reference kernel is the M_ref-filled value
    (flagged).  For a plain function of configurations ``target`` is
    evaluated at omega_{Lambda_M} theta and at omega itself.
    """
    if hasattr(target, "filled_kernel"):
        if M_ref is None or M_ref <= M:
            raise ValueError("a reference radius M_ref > M is required")
        a = target.filled_kernel(region, omega, M, theta).expect(f)
        b = target.filled_kernel(region, omega, M_ref, theta).expect(f)
        return DeltaResult(abs(a - b), f"M_ref={M_ref}")
    a = target(splice(omega, theta, cube(M, omega.dim)))
    return DeltaResult(abs(a - target(omega)), "exact")


# --- bad sets and continuity rates -------------------------------------------


@dataclass(frozen=True)
class BadSetRecord:
    theta: str
    region: Region
    epsilon: float
    M: np.ndarray
    probability: np.ndarray
    error: np.ndarray
    method: str

    def __post_init__(self):
        if np.any((self.probability < 0) | (self.probability > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.diff(self.M) <= 0):
            raise ValueError("M must be strictly increasing")


def sample_configurations(mu, region: Region, n: int, seed: int = 0) -> np.ndarray:
    """Exact samples of mu's marginal on ``region``, shape (n, |region|)."""
    if hasattr(mu, "sample"):
        return mu.sample(region, n, seed)
    if isinstance(mu, MarkovChain1D):
        return _sample_chain(mu, region, n, seed)
    law = mu.marginal(region)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 1], dtype=np.uint64)))
    idx = rng.choice(len(law.probabilities), size=n, p=law.probabilities)
    return configurations(len(region))[idx]


def _sample_chain(mu: MarkovChain1D, region: Region, n: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2], dtype=np.uint64)))
    sites = [x[0] for x in region.sites]
    out = np.empty((n, len(sites)), dtype=np.int8)
    state = (rng.random(n) < mu.stationary[1]).astype(int)
    out[:, 0] = 2 * state - 1
    for a in range(1, len(sites)):
        Pg = np.linalg.matrix_power(mu.transition, sites[a] - sites[a - 1])
        state = (rng.random(n) < Pg[state, 1]).astype(int)
        out[:, a] = 2 * state - 1
    return out


def delta_values(gamma, region: Region, f: LocalFunction, theta: TailedConfiguration, M: int,
                 M_ref: int, annulus: Region, configs: np.ndarray) -> np.ndarray:
    out = np.empty(len(configs))
    for i, c in enumerate(configs):
        eta = from_values(annulus, c, theta.tail)
        out[i] = directional_delta(gamma, region, M, f, theta, eta, M_ref).value
    return out


def bad_set_probability(mu, gamma, theta: TailedConfiguration, region: Region, f: LocalFunction,
                        epsilon: float, Ms, M_ref: int, engine: str = "exact", samples: int = 2000,
                        seed: int = 0, d: int = 1, theta_name: str = "") -> BadSetRecord:
    """mu[delta^theta_{Lambda,M}(f) > epsilon] for each M, with delta from the M_ref reference.

    ``exact`` enumerates the annulus of radius M_ref under mu's marginal;
    ``sample`` draws exact samples of that annulus and reports binomial errors.
    """
    Ms = np.asarray(Ms)
    annulus = cube(M_ref, d).minus(region)
    probs, errs = [], []
    if engine == "exact":
        law = mu.marginal(annulus)
        cfg = configurations(len(annulus))
        keep = law.probabilities > 0
        for M in Ms:
            dv = delta_values(gamma, region, f, theta, int(M), M_ref, annulus, cfg[keep])
            probs.append(min(1.0, math.fsum(law.probabilities[keep][dv > epsilon])))
            errs.append(0.0)
    elif engine == "sample":
        cfg = sample_configurations(mu, annulus, samples, seed)
        uniq, inv = np.unique(cfg, axis=0, return_inverse=True)
        for M in Ms:
            dv = delta_values(gamma, region, f, theta, int(M), M_ref, annulus, uniq)[inv.ravel()]
            p = float(np.mean(dv > epsilon))
            probs.append(p)
            errs.append(math.sqrt(max(p * (1 - p), 0.0) / samples))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return BadSetRecord(theta_name or repr(theta.tail.kind), region, epsilon, Ms,
                        np.array(probs), np.array(errs), engine)


@dataclass(frozen=True)
class RateSeries:
    alpha: np.ndarray
    entries: np.ndarray  # (1/alpha_M) log mu[A]; -inf where the probability is 0
    limsup_estimate: float
    note: str = "estimate over the computed range, not a verdict"


def continuity_rate(record: BadSetRecord, alpha) -> RateSeries:
    """Normalized log bad-set probabilities; the limsup is the max over the upper half of M."""
    alpha = np.asarray(alpha, dtype=float)
    if len(record.M) == 0:
        raise ValueError("empty record")
    if len(alpha) != len(record.M) or np.any(np.diff(alpha) <= 0) or np.any(alpha <= 0):
        raise ValueError("alpha must be positive, strictly increasing and match the record")
    with np.errstate(divide="ignore"):
        entries = np.log(record.probability) / alpha
    tail = entries[len(entries) // 2:]
    return RateSeries(alpha, entries, float(np.max(tail)))


def prop1_bound(H, alpha, c: float, delta: float) -> np.ndarray:
    """(1/(alpha_M delta)) e^{alpha_M (delta - c)} + (1/(alpha_M delta)) H_M."""
    if not 0 < delta < c:
        raise ValueError("need 0 < delta < c")
    H = np.asarray(H, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return (np.exp(alpha * (delta - c)) + H) / (alpha * delta)
