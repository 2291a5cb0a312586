"""Relative entropy, pressure, Csiszar's inequality, decoupling and the Legendre gap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .engines import MarkovChain1D, enumerate_measure
from .lattice import (
    Interaction,
    LocalFunction,
    Region,
    TailedConfiguration,
    configurations,
    cube,
    from_values,
    translate,
)
from .specification import FiniteMeasure


# --- measure recipes --------------------------------------------------------


@dataclass(frozen=True)
class ProductMeasure:
    """I.i.d. spins with P(+1) = p_plus on Z^d."""

    p_plus: float
    d: int = 1
    independent = True  # every cylinder ratio is exactly 1

    def marginal(self, region: Region) -> FiniteMeasure:
        return FiniteMeasure.product(region, self.p_plus)


@dataclass(frozen=True)
class BoxGibbs:
    """Finite-volume Gibbs law on ``window`` with a fixed exterior, viewed through its marginals."""

    phi: Interaction
    window: Region
    boundary: TailedConfiguration

    def marginal(self, region: Region) -> FiniteMeasure:
        if not region.issubset(self.window):
            raise ValueError("region escapes the Gibbs window")
        return self._law.marginal(region)

    @property
    def _law(self) -> FiniteMeasure:
        law = self.__dict__.get("_cached")
        if law is None:
            law = enumerate_measure(self.phi, self.window, self.boundary)
            object.__setattr__(self, "_cached", law)
        return law


# --- relative entropy -------------------------------------------------------


def relative_entropy(mu: FiniteMeasure, nu: FiniteMeasure) -> float:
    """H(mu|nu) = sum mu log(mu/nu), with 0 log 0 = 0 and +inf off nu's support."""
    if mu.support != nu.support:
        raise ValueError("relative entropy needs measures on the same region")
    m, n = mu.probabilities, nu.probabilities
    pos = m > 0
    if np.any(n[pos] == 0):
        return math.inf
    return max(math.fsum(m[pos] * (np.log(m[pos]) - np.log(n[pos]))), 0.0)


def markov_relative_entropy(mu: MarkovChain1D, nu: MarkovChain1D, length: int) -> float:
    """H on ``length`` consecutive sites of two stationary chains, by the chain rule."""
    if length < 1:
        return 0.0
    h0 = relative_entropy(FiniteMeasure(Region.of([(0,)]), mu.stationary),
                          FiniteMeasure(Region.of([(0,)]), nu.stationary))
    return h0 + (length - 1) * markov_entropy_rate(mu, nu)


def markov_entropy_rate(mu: MarkovChain1D, nu: MarkovChain1D) -> float:
    """Relative entropy rate sum_s pi(s) D(P_mu(s,.) | P_nu(s,.))."""
    joint = mu.pair_law()
    pos = joint > 0
    if np.any(nu.transition[pos] == 0):
        return math.inf
    return math.fsum((joint[pos] * (np.log(mu.transition[pos]) - np.log(nu.transition[pos]))).ravel())


@dataclass(frozen=True)
class EntropySeries:
    n: np.ndarray
    entropy: np.ndarray
    per_site: np.ndarray
    increments: np.ndarray  # (H_n - H_{n-1}) per added site; nan at the first n
    method: str

    @property
    def last_value(self) -> float:
        return float(self.per_site[-1])

    @property
    def increment_estimate(self) -> float:
        return float(self.increments[-1])


def entropy_density_series(mu, nu, n_max: int, d: int = 1, n_min: int = 0) -> EntropySeries:
    """H_{Lambda_n}(mu|nu) for cubes of radius n_min..n_max with two density estimates.

    Stationary Markov chains use the exact chain rule; anything else goes
    through exact marginals.
    """
    ns = np.arange(n_min, n_max + 1)
    chain = isinstance(mu, MarkovChain1D) and isinstance(nu, MarkovChain1D)
    H, sizes = [], []
    for n in ns:
        vol = cube(int(n), d)
        sizes.append(len(vol))
        if chain:
            H.append(markov_relative_entropy(mu, nu, len(vol)))
        else:
            H.append(relative_entropy(mu.marginal(vol), nu.marginal(vol)))
    H = np.array(H)
    sizes = np.array(sizes, dtype=float)
    inc = np.full(len(ns), np.nan)
    with np.errstate(invalid="ignore"):
        inc[1:] = np.diff(H) / np.diff(sizes)
    return EntropySeries(ns, H, H / sizes, inc, "markov-chain-rule" if chain else "exact-marginals")


# --- pressure -----------------------------------------------------------------


@dataclass(frozen=True)
class PressureSeries:
    n: np.ndarray
    pressure: np.ndarray
    method: str

    @property
    def estimate(self) -> float:
        return float(self.pressure[-1])


def _translates(f: LocalFunction, vol: Region) -> list:
    return [translate(f, x) for x in vol.sites]


def finite_pressure(f: LocalFunction, nu, vol: Region, periodic: bool = False) -> float:
    """(1/|V|) log nu[exp(sum_{x in V} tau_x f)].

    The default reads nu on the union of the translated supports.  With
    ``periodic`` the translates wrap around a one-dimensional ring on V.
    """
    if periodic:
        if vol.dim != 1:
            raise ValueError("periodic evaluation is one-dimensional")
        L = len(vol)
        law = nu.marginal(vol)
        spins = configurations(L)
        offs = [x[0] for x in f.support.sites]
        total = np.zeros(len(spins))
        for i in range(L):
            sub = np.stack([spins[:, (i + o) % L] for o in offs], axis=1)
            total = total + f.on(f.support, sub)
    else:
        translates = _translates(f, vol)
        win = vol
        for g in translates:
            win = win.union(g.support)
        law = nu.marginal(win)
        spins = configurations(len(win))
        total = np.zeros(len(spins))
        for g in translates:
            total = total + g.on(win, spins)
    p = law.probabilities
    pos = p > 0
    return float(logsumexp(total[pos], b=p[pos])) / len(vol)


def _pair_table(f: LocalFunction) -> np.ndarray | None:
    """f as a 2x2 table in (spin at 0, spin at 1) if it reads only those sites."""
    sites = f.support.sites
    if not set(sites) <= {(0,), (1,)}:
        return None
    pair = Region.of([(0,), (1,)])
    return f.on(pair, configurations(2)).reshape(2, 2)


def markov_finite_pressure(f: LocalFunction, nu: MarkovChain1D, n_sites: int) -> float:
    """Exact d=1 pressure on n consecutive translates via the tilted transfer matrix."""
    F = _pair_table(f)
    if F is None:
        raise ValueError("transfer evaluation needs f supported in {0, 1}")
    A = nu.transition * np.exp(F)
    v = nu.stationary.copy()
    log_total = 0.0
    for _ in range(n_sites):
        v = v @ A
        c = v.sum()
        log_total += math.log(c)
        v /= c
    return log_total / n_sites


def markov_pressure(f: LocalFunction, nu: MarkovChain1D) -> float:
    """Infinite-volume pressure: log of the dominant eigenvalue of P_nu(s,t) e^{f(s,t)}."""
    F = _pair_table(f)
    if F is None:
        raise ValueError("transfer evaluation needs f supported in {0, 1}")
    return float(math.log(max(abs(np.linalg.eigvals(nu.transition * np.exp(F))))))


def pressure_estimate(f: LocalFunction, nu, n_max: int, d: int = 1, n_min: int = 0,
                      periodic: bool = False) -> PressureSeries:
    """Finite-volume pressures on cubes of radius n_min..n_max."""
    ns = np.arange(n_min, n_max + 1)
    use_chain = isinstance(nu, MarkovChain1D) and not periodic and _pair_table(f) is not None
    vals = []
    for n in ns:
        vol = cube(int(n), d)
        if use_chain:
            vals.append(markov_finite_pressure(f, nu, len(vol)))
        else:
            vals.append(finite_pressure(f, nu, vol, periodic))
    method = "tilted-transfer" if use_chain else ("periodic-ring" if periodic else "exact-enumeration")
    return PressureSeries(ns, np.array(vals), method)


# --- Csiszar --------------------------------------------------------------------


def csiszar_gap(mu, nu, inner: Region, outer: Region) -> float:
    """[H_outer - H_inner] - (1/2) (nu|g_outer - g_inner|)^2 with g the marginal densities."""
    if not inner.issubset(outer):
        raise ValueError("inner region must lie in the outer region")
    mo, no = mu.marginal(outer), nu.marginal(outer)
    mi, ni = mu.marginal(inner), nu.marginal(inner)
    Ho, Hi = relative_entropy(mo, no), relative_entropy(mi, ni)
    if math.isinf(Ho) or math.isinf(Hi):
        raise ValueError("relative entropies are infinite")
    pos = no.probabilities > 0
    g_out = np.zeros_like(no.probabilities)
    g_out[pos] = mo.probabilities[pos] / no.probabilities[pos]
    idx = _sub_index(outer, inner)
    with np.errstate(divide="ignore", invalid="ignore"):
        gi = np.where(ni.probabilities > 0, mi.probabilities / ni.probabilities, 0.0)
    g_in = gi[idx]
    l1 = math.fsum((no.probabilities * np.abs(g_out - g_in)).ravel())
    return (Ho - Hi) - 0.5 * l1 * l1


def _sub_index(outer: Region, inner: Region) -> np.ndarray:
    """Index of the inner configuration for every outer configuration."""
    from .lattice import config_index

    return config_index(configurations(len(outer))[:, outer.positions(inner)])


# --- decoupling -----------------------------------------------------------------


@dataclass(frozen=True)
class DecouplingProfile:
    n: int
    gaps: np.ndarray
    constants: np.ndarray
    family: str
    skipped: int = 0
    note: str = "lower bound over the event family"


def _shell(n: int, g: int, d: int) -> Region:
    return cube(n + g + 1, d).minus(cube(n + g, d))


def decoupling_constant(nu, n: int, g: int, family: str = "single-site", d: int = 1) -> tuple:
    """max |log nu(A and B) / (nu(A) nu(B))| over cylinder pairs A in F_{Lambda_n},
    B on the shell at distance g beyond Lambda_n.  Returns (value, skipped)."""
    if getattr(nu, "independent", False):
        return 0.0, 0
    inner = cube(n, d)
    shell = _shell(n, g, d)
    if family == "single-site":
        pairs = [(Region.of([x]), Region.of([y])) for x in inner.sites for y in shell.sites]
    elif family == "cylinders":
        pairs = [(inner, shell)]
    else:
        raise ValueError(f"unknown event family {family!r}")
    worst, skipped = 0.0, 0
    for A, B in pairs:
        joint = nu.marginal(A.union(B))
        U = A.union(B)
        pa = joint.marginal(A).probabilities
        pb = joint.marginal(B).probabilities
        pj = joint.probabilities
        ia = _sub_index(U, A)
        ib = _sub_index(U, B)
        denom = pa[ia] * pb[ib]
        ok = (pj > 0) & (denom > 0)
        skipped += int((~ok).sum())
        if ok.any():
            worst = max(worst, float(np.max(np.abs(np.log(pj[ok]) - np.log(denom[ok])))))
    return worst, skipped


def decoupling_profile(nu, n: int, gaps, family: str = "single-site", d: int = 1) -> DecouplingProfile:
    vals, skipped = [], 0
    for g in gaps:
        c, s = decoupling_constant(nu, n, int(g), family, d)
        vals.append(c)
        skipped += s
    return DecouplingProfile(n, np.asarray(gaps), np.array(vals), family, skipped)


# --- Legendre conjugacy ----------------------------------------------------------


@dataclass(frozen=True)
class LegendreResult:
    pressure: float
    best_trial_value: float
    gap: float
    family: str
    best_trial: MarkovChain1D | None = field(default=None, compare=False)
    certified: bool = False
    converged: bool = True


def _markov_from_params(a: float, b: float) -> MarkovChain1D:
    """Chain with P(+|-) = expit(a), P(-|+) = expit(b)."""
    up, down = expit(a), expit(b)
    P = np.array([[1.0 - up, up], [down, 1.0 - down]])
    pi = np.array([down, up]) / (up + down)
    return MarkovChain1D(P, pi)


def trial_value(f: LocalFunction, mu: MarkovChain1D, nu: MarkovChain1D) -> float:
    """mu(f) - h(mu|nu) for a stationary chain mu and f on {0, 1}."""
    F = _pair_table(f)
    return float((mu.pair_law() * F).sum()) - markov_entropy_rate(mu, nu)


def tilted_chain(f: LocalFunction, nu: MarkovChain1D) -> MarkovChain1D:
    """The Gibbs chain of the tilted interaction: Doob transform of P_nu e^f."""
    A = nu.transition * np.exp(_pair_table(f))
    w, vr = np.linalg.eig(A)
    k = int(np.argmax(np.abs(w)))
    lam, r = float(np.real(w[k])), np.abs(np.real(vr[:, k]))
    P = A * r[None, :] / (lam * r[:, None])
    P /= P.sum(axis=1, keepdims=True)
    return MarkovChain1D.from_transition(P)


def legendre_gap(f: LocalFunction, nu, family: str = "markov1", starts: int = 5) -> LegendreResult:
    """Pressure minus the best mu(f) - h(mu|nu) over a trial family (d = 1).

    Families: ``markov1`` (stationary first-order chains) and ``product``.
    """
    if not isinstance(nu, MarkovChain1D):
        raise NotImplementedError("trial families are available for d = 1 chains only")
    p = markov_pressure(f, nu)
    best, best_mu, converged = -math.inf, None, True
    if family == "markov1":
        for a0, b0 in [(0.0, 0.0), (-2.0, -2.0), (2.0, 2.0), (-2.0, 2.0), (2.0, -2.0)][:starts]:
            res = minimize(lambda t: -trial_value(f, _markov_from_params(*t), nu), [a0, b0],
                           method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
            converged &= bool(res.success)
            if -res.fun > best:
                best, best_mu = -res.fun, _markov_from_params(*res.x)
    elif family == "product":
        for q0 in (-2.0, 0.0, 2.0):
            res = minimize(lambda t: -trial_value(f, MarkovChain1D.product(float(expit(t[0]))), nu), [q0],
                           method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 2000})
            converged &= bool(res.success)
            if -res.fun > best:
                best, best_mu = -res.fun, MarkovChain1D.product(float(expit(res.x[0])))
    else:
        raise ValueError(f"unknown trial family {family!r}")
    target = tilted_chain(f, nu)
    certified = family == "markov1" and np.allclose(best_mu.transition, target.transition, atol=1e-5)
    return LegendreResult(p, best, p - best, family, best_mu, certified, converged)


def entropy_lower_bound(mu: MarkovChain1D, nu: MarkovChain1D, dictionary: list) -> float:
    """sup over the dictionary of mu(f) - p(f|nu): a lower bound on h(mu|nu)."""
    return max(float((mu.pair_law() * _pair_table(f)).sum()) - markov_pressure(f, nu) for f in dictionary)


# --- the C_M term ----------------------------------------------------------------


@dataclass(frozen=True)
class CMResult:
    C: float
    B: float
    A: float | None = None
    lhs: float | None = None
    reference: int | None = None


def _annulus_laws(mu, nu, region: Region, M: int, d: int):
    big = cube(M, d)
    if not region.issubset(big):
        raise ValueError("volume must lie in the cube of radius M")
    ann = big.minus(region)
    mb, nb = mu.marginal(big), nu.marginal(big)
    return big, ann, mb, nb


def _filled_values(gamma, region, ann, vals, M, theta, f, tail_config):
    out = np.empty(len(vals))
    for i, v in enumerate(vals):
        omega = from_values(ann, v, tail_config.tail) if len(ann) else tail_config
        out[i] = gamma.filled_kernel(region, omega, M, theta).expect(f)
    return out


def cm_term(mu, nu, gamma, region: Region, M: int, theta: TailedConfiguration, f: LocalFunction,
            M_ref: int | None = None, d: int = 1) -> CMResult:
    """C_M = nu[g_ann (gamma^{M,theta} f - gamma f)] and B_M = nu[(g_ann - g_M) f].

    Uses nu[g_ann gamma f] = nu[g_ann f], valid because nu is consistent with
    gamma and g_ann does not read the volume.  With ``M_ref`` the companion
    A_M = mu[gamma^{M_ref,theta} f - gamma^{M,theta} f] and the left side
    mu[gamma^{M_ref,theta} f - f] are added, the reference kernel standing in
    for gamma.
    """
    if not f.support.issubset(region):
        raise ValueError("f must be supported in the volume")
    big, ann, mb, nb = _annulus_laws(mu, nu, region, M, d)
    ma, na = mb.marginal(ann), nb.marginal(ann)
    if np.any((ma.probabilities > 0) & (na.probabilities == 0)):
        raise ValueError("mu is not absolutely continuous with respect to nu on the annulus")
    cfg = configurations(len(ann))
    filled = _filled_values(gamma, region, ann, cfg, M, theta, f, theta)
    # nu(f | annulus) for each annulus configuration
    fvals = f.on(big, configurations(len(big)))
    ia = _sub_index(big, ann)
    nu_f = np.bincount(ia, weights=nb.probabilities * fvals, minlength=len(cfg))
    mu_f = np.bincount(ia, weights=mb.probabilities * fvals, minlength=len(cfg))
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(na.probabilities > 0, nu_f / na.probabilities, 0.0)
    C = math.fsum(ma.probabilities * (filled - cond))
    B = math.fsum(ma.probabilities * cond) - math.fsum(mu_f)
    if M_ref is None:
        return CMResult(C, B)
    rbig = cube(M_ref, d)
    rann = rbig.minus(region)
    mr = mu.marginal(rbig).marginal(rann)
    rcfg = configurations(len(rann))
    ref = _filled_values(gamma, region, rann, rcfg, M_ref, theta, f, theta)
    at_M = _filled_values(gamma, region, ann, cfg, M, theta, f, theta)
    proj = _sub_index(rann, ann)
    A = math.fsum(mr.probabilities * (ref - at_M[proj]))
    lhs = math.fsum(mr.probabilities * ref) - math.fsum(mu_f)
    return CMResult(C, B, A, lhs, M_ref)
