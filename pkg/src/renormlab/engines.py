"""Compute backends: exact enumeration, 1-D transfer matrices, heat-bath Monte Carlo."""

from __future__ import annotations

import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .lattice import (
    Interaction,
    LocalFunction,
    Region,
    TailedConfiguration,
    config_index,
    configurations,
    neighbours,
    outer_boundary,
)
from .specification import FiniteMeasure

MAX_FREE_SITES = 24


class EngineError(RuntimeError):
    """An engine could not produce a result within its limits."""


# --- exact enumeration --------------------------------------------------------


def log_boltzmann(phi: Interaction, window: Region, spins: np.ndarray,
                  boundary: TailedConfiguration) -> np.ndarray:
    """Boltzmann exponents of configurations ``spins`` (n, |W|) with exterior ``boundary``."""
    spins = np.atleast_2d(spins).astype(float)
    pairs = [(i, window.position(y)) for i, x in enumerate(window.sites)
             for y in neighbours(x) if y in window and window.position(y) > i]
    ext = np.zeros(len(window))
    for i, x in enumerate(window.sites):
        ext[i] = sum(boundary.at(y) for y in neighbours(x) if y not in window)
    e = phi.h * spins.sum(axis=1) + phi.J * spins @ ext
    for i, j in pairs:
        e = e + phi.J * spins[:, i] * spins[:, j]
    return phi.beta * e


def enumerate_measure(phi: Interaction, window: Region, boundary: TailedConfiguration,
                      constraints: dict | None = None) -> FiniteMeasure:
    """Exact Boltzmann law on ``window`` with some sites pinned by ``constraints``."""
    constraints = {tuple(k) if not isinstance(k, int) else (k,): v for k, v in (constraints or {}).items()}
    free = [x for x in window.sites if x not in constraints]
    if len(free) > MAX_FREE_SITES:
        raise EngineError(f"{len(free)} free sites exceed the enumeration cap of {MAX_FREE_SITES}")
    if len(window) > 26:
        raise EngineError("window too large to tabulate")
    cfg = configurations(len(free))
    spins = np.empty((len(cfg), len(window)), dtype=np.int8)
    for x, v in constraints.items():
        if x in window:
            spins[:, window.position(x)] = v
    if free:
        spins[:, window.positions(Region.of(free))] = cfg
    logw = log_boltzmann(phi, window, spins, boundary)
    w = np.exp(logw - logw.max())
    probs = np.zeros(2 ** len(window))
    np.add.at(probs, config_index(spins), w / w.sum())
    return FiniteMeasure(window, probs / probs.sum())


# --- one-dimensional transfer matrices ---------------------------------------


def transfer_matrix(phi: Interaction) -> np.ndarray:
    """Symmetric 2x2 transfer matrix, states ordered (-1, +1)."""
    s = np.array([-1.0, 1.0])
    b = phi.beta
    return np.exp(b * phi.J * np.outer(s, s) + 0.5 * b * phi.h * (s[:, None] + s[None, :]))


@dataclass(frozen=True)
class TransferResult:
    marginals: np.ndarray  # P(spin = +1) per site
    pair_correlations: np.ndarray  # E[s_i s_{i+1}], i = 0..n-2 (n-1 entries; n for periodic)
    log_partition_per_site: float


def transfer_matrix_1d(phi: Interaction, n: int, boundary: str = "periodic") -> TransferResult:
    """Exact marginals, neighbour correlations and log Z / n of an n-site chain.

    ``boundary`` is ``periodic``, ``free``, ``plus`` or ``minus``; fixed
    boundaries attach one pinned spin beyond each end.
    """
    if n < 1:
        raise ValueError("n must be positive")
    s = np.array([-1.0, 1.0])
    if boundary == "periodic":
        return _periodic(phi, n)
    node = np.exp(phi.beta * phi.h * s)
    edge = np.exp(phi.beta * phi.J * np.outer(s, s))
    ends = [np.ones(2), np.ones(2)]
    if boundary in ("plus", "minus"):
        b = 1.0 if boundary == "plus" else -1.0
        ends = [np.exp(phi.beta * phi.J * b * s)] * 2
    elif boundary != "free":
        raise ValueError(f"unknown boundary {boundary!r}")
    # scaled forward/backward messages
    alpha = np.empty((n, 2))
    log_scale = 0.0
    a = node * ends[0]
    for i in range(n):
        if i > 0:
            a = (a @ edge) * node
        if i == n - 1:
            a = a * ends[1]
        c = a.sum()
        log_scale += math.log(c)
        a = a / c
        alpha[i] = a
    beta = np.empty((n, 2))
    beta[n - 1] = np.ones(2)
    bvec = np.ones(2)
    for i in range(n - 2, -1, -1):
        w = node * (ends[1] if i + 1 == n - 1 else 1.0)
        bvec = edge @ (w * bvec)
        bvec = bvec / bvec.sum()
        beta[i] = bvec
    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    pair = np.empty(max(n - 1, 0))
    for i in range(n - 1):
        w = node * (ends[1] if i + 1 == n - 1 else 1.0)
        joint = alpha[i][:, None] * edge * (w * beta[i + 1])[None, :]
        joint /= joint.sum()
        pair[i] = float((joint * np.outer(s, s)).sum())
    return TransferResult(post[:, 1], pair, log_scale / n)


def _periodic(phi: Interaction, n: int) -> TransferResult:
    T = transfer_matrix(phi)
    lam, V = np.linalg.eigh(T)
    order = np.argsort(-np.abs(lam))
    lam, V = lam[order], V[:, order]
    r = lam / lam[0]
    S = V.T @ np.diag([-1.0, 1.0]) @ V
    rn = r**n
    Zr = rn.sum()
    m = float((rn * np.diag(S)).sum() / Zr)
    rn1 = r ** (n - 1)
    corr = float(sum(S[k, l] * r[l] * S[l, k] * rn1[k] for k in range(2) for l in range(2)) / Zr) if n > 1 else 1.0
    logz = n * math.log(lam[0]) + math.log(Zr)
    return TransferResult(np.full(n, 0.5 * (1 + m)), np.full(n, corr), logz / n)


@dataclass(frozen=True)
class MarkovChain1D:
    """Stationary two-state Markov chain on Z, states ordered (-1, +1).

    ``transition[s, t]`` = P(next = t | current = s); ``stationary`` its
    invariant law.  The infinite-volume 1-D Ising measure is of this form.
    """

    transition: np.ndarray = field(compare=False)
    stationary: np.ndarray = field(compare=False)

    @classmethod
    def from_transition(cls, P) -> "MarkovChain1D":
        P = np.asarray(P, dtype=float)
        w, v = np.linalg.eig(P.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        return cls(P, pi / pi.sum())

    @classmethod
    def gibbs(cls, phi: Interaction) -> "MarkovChain1D":
        T = transfer_matrix(phi)
        lam, V = np.linalg.eigh(T)
        v = np.abs(V[:, np.argmax(lam)])
        P = T * v[None, :] / (lam.max() * v[:, None])
        P /= P.sum(axis=1, keepdims=True)
        pi = v**2 / (v**2).sum()
        return cls(P, pi)

    @classmethod
    def product(cls, p_plus: float) -> "MarkovChain1D":
        row = np.array([1.0 - p_plus, p_plus])
        return cls(np.vstack([row, row]), row.copy())

    def log_probabilities(self, sites: list, spins: np.ndarray) -> np.ndarray:
        """log P of configurations ``spins`` (n, k) on sorted integer ``sites``."""
        idx = (np.asarray(spins) > 0).astype(int)
        out = np.log(self.stationary)[idx[:, 0]]
        for a in range(1, len(sites)):
            gap = sites[a] - sites[a - 1]
            Pg = np.linalg.matrix_power(self.transition, gap)
            with np.errstate(divide="ignore"):
                out = out + np.log(Pg)[idx[:, a - 1], idx[:, a]]
        return out

    def marginal(self, region: Region) -> FiniteMeasure:
        sites = [x[0] for x in region.sites]
        lp = self.log_probabilities(sites, configurations(len(sites)))
        p = np.exp(lp)
        return FiniteMeasure(region, p / p.sum())

    def pair_law(self) -> np.ndarray:
        """Joint law of two neighbouring spins."""
        return self.stationary[:, None] * self.transition


# --- strips: column transfer chains ------------------------------------------


class ColumnChain:
    """The Ising model on Z x {0..w-1} as a stationary Markov chain of columns.

    Columns are the hidden states of the hidden-Markov formulation used for
    exact renormalized conditionals.  ``block`` consecutive columns are
    grouped into one block state; state bit order follows
    :func:`renormlab.lattice.configurations` over (column offset, row).
    """

    def __init__(self, phi: Interaction, width: int = 1, block: int = 1,
                 periodic_transverse: bool | None = None):
        self.phi, self.width, self.block = phi, width, block
        if periodic_transverse is None:
            periodic_transverse = width >= 3
        self.periodic_transverse = periodic_transverse
        cols = configurations(width).astype(float)
        self.columns = cols
        vbonds = [(r, r + 1) for r in range(width - 1)]
        if periodic_transverse and width >= 3:
            vbonds.append((width - 1, 0))
        e_col = phi.h * cols.sum(axis=1)
        for a, c in vbonds:
            e_col = e_col + phi.J * cols[:, a] * cols[:, c]
        logK = phi.beta * (0.5 * e_col[:, None] + phi.J * cols @ cols.T + 0.5 * e_col[None, :])
        K = np.exp(logK - logK.max())
        lam, V = np.linalg.eigh(K)
        v = np.abs(V[:, np.argmax(lam)])
        P = K * v[None, :] / v[:, None]
        P /= P.sum(axis=1, keepdims=True)
        pi = v**2 / (v**2).sum()
        self.column_transition, self.column_stationary = P, pi
        # block chain
        nc = len(cols)
        if block == 1:
            Q, bpi = P, pi
        else:
            # block state = (c_0, ..., c_{b-1}); c_0 most significant
            states = np.array(np.unravel_index(np.arange(nc**block), (nc,) * block)).T
            inner = np.ones(len(states))
            for k in range(block - 1):
                inner = inner * P[states[:, k], states[:, k + 1]]
            bpi = pi[states[:, 0]] * inner
            Q = P[states[:, -1]][:, states[:, 0]] * inner[None, :]
            self.block_columns = states
        self.transition, self.stationary = Q, bpi
        if block == 1:
            self.block_columns = np.arange(nc)[:, None]

    @property
    def n_states(self) -> int:
        return len(self.stationary)

    def block_spins(self) -> np.ndarray:
        """Spins of every block state, shape (n_states, block, width)."""
        return self.columns[self.block_columns]


def filter_messages(Q: np.ndarray, start: np.ndarray, likelihoods) -> np.ndarray:
    """Normalized forward messages after absorbing each likelihood vector in turn."""
    a = start.copy()
    for L in likelihoods:
        a = (a @ Q) * L
        a = a / a.sum()
    return a


# --- Monte Carlo --------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to rerun an engine call."""

    engine: str
    model: dict
    seed: int | None = None
    chains: int | None = None
    sweeps: int | None = None
    burn_in: int | None = None
    sweeps_per_sample: int | None = None
    extra: dict = field(default_factory=dict)
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


@dataclass(frozen=True)
class SampleStream:
    window: Region
    samples: np.ndarray = field(compare=False)  # (chains, n_samples, |W|)
    constraints: dict = field(default_factory=dict)
    manifest: RunManifest | None = None


def uniforms(seed: int, chain: int, sweep: int, n: int) -> np.ndarray:
    """Counter-based uniforms keyed by (seed, chain, sweep); entry i belongs to site i."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, chain], dtype=np.uint64)
    # the sweep sits in the second counter word: drawing n values advances the
    # first word, so sweeps never share counter blocks
    bg = np.random.Philox(key=key, counter=np.array([0, sweep, 0, 0], dtype=np.uint64))
    return np.random.Generator(bg).random(n)


@dataclass(frozen=True)
class ImageFactor:
    """Reweighting by T(image_spin | source block): ``prob(image_spin, block_sum)``."""

    sites: tuple
    image_spin: int
    prob: object  # callable(image_spin, block_sum) -> probability


class HeatBath:
    """Single-site heat-bath updates in lexicographic scan order."""

    def __init__(self, phi: Interaction, window: Region, boundary: TailedConfiguration,
                 constraints: dict | None = None, factors: tuple = ()):
        self.phi, self.window = phi, window
        n = len(window)
        self.nbrs = [[window.position(y) for y in neighbours(x) if y in window] for x in window.sites]
        self.ext = np.array([sum(boundary.at(y) for y in neighbours(x) if y not in window)
                             for x in window.sites], dtype=float)
        cons = {}
        for k, v in (constraints or {}).items():
            k = (k,) if isinstance(k, int) else tuple(k)
            if k in window:
                cons[window.position(k)] = int(v)
        self.constraints = cons
        self.factors = []
        self.site_factors = [[] for _ in range(n)]
        for f in factors:
            pos = tuple(window.position(x) for x in f.sites)
            self.factors.append((pos, f.image_spin, f.prob))
            for p in pos:
                self.site_factors[p].append(len(self.factors) - 1)

    def initial(self, fill: int) -> np.ndarray:
        s = np.full(len(self.window), fill, dtype=np.int8)
        for p, v in self.constraints.items():
            s[p] = v
        for pos, spin, prob in self.factors:
            if prob(spin, int(s[list(pos)].sum())) == 0.0:
                s[list(pos)] = spin
        return s

    def sweep(self, s: np.ndarray, u: np.ndarray) -> None:
        b, J, h = self.phi.beta, self.phi.J, self.phi.h
        for i in range(len(s)):
            if i in self.constraints:
                continue
            field_ = J * (sum(int(s[j]) for j in self.nbrs[i]) + self.ext[i]) + h
            logw = [-b * field_, b * field_]
            if self.site_factors[i]:
                for k, val in enumerate((-1, 1)):
                    s[i] = val
                    for fi in self.site_factors[i]:
                        pos, spin, prob = self.factors[fi]
                        p = prob(spin, int(s[list(pos)].sum()))
                        logw[k] += math.log(p) if p > 0 else -math.inf
            m = max(logw)
            wp = math.exp(logw[1] - m)
            wm = math.exp(logw[0] - m)
            s[i] = 1 if u[i] < wp / (wp + wm) else -1


def _run_chain(sampler: HeatBath, seed: int, chain: int, key_chain: int, sweeps: int, burn_in: int,
               thin: int, fill: int, record_all: bool = False) -> np.ndarray:
    s = sampler.initial(fill)
    out = []
    for t in range(sweeps):
        sampler.sweep(s, uniforms(seed, key_chain, t, len(s)))
        if record_all or (t >= burn_in and (t - burn_in) % thin == 0):
            out.append(s.copy())
    return np.array(out, dtype=np.int8)


def default_threads() -> int:
    return int(os.environ.get("RENORMLAB_THREADS", "1"))


def mc_sample(phi: Interaction, window: Region, boundary: TailedConfiguration,
              constraints: dict | None = None, seed: int = 0, chains: int = 4,
              sweeps: int = 2000, burn_in: int = 200, sweeps_per_sample: int = 1,
              factors: tuple = (), threads: int | None = None, start: int = 1) -> SampleStream:
    """Heat-bath samples of the constrained Boltzmann law on ``window``.

    Chain ``c`` draws its uniforms from a Philox stream keyed by (seed, c),
    with the sweep number as counter, so results do not depend on thread
    count or scheduling.
    """
    if sweeps <= burn_in:
        raise ValueError("sweeps must exceed burn_in")
    t0 = time.perf_counter()
    sampler = HeatBath(phi, window, boundary, constraints, tuple(factors))
    threads = threads or default_threads()
    jobs = [(sampler, seed, c, c, sweeps, burn_in, sweeps_per_sample, start) for c in range(chains)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]
    manifest = RunManifest(
        engine="heat-bath", model=asdict(phi), seed=seed, chains=chains, sweeps=sweeps,
        burn_in=burn_in, sweeps_per_sample=sweeps_per_sample,
        extra={"window": [list(x) for x in window.sites],
               "rng": "Philox(key=(seed, chain), counter=(0, sweep, 0, 0))",
               "error_bar": "batch means: se = sd(batch means) / sqrt(#batches)",
               "magnetization_autocorrelation": integrated_autocorrelation(
                   np.stack(results).astype(float).mean(axis=2))},
        wall_clock=time.perf_counter() - t0,
    )
    return SampleStream(window, np.stack(results), dict(constraints or {}), manifest)


def coupled_pair(phi: Interaction, window: Region, seed: int = 0, sweeps: int = 200,
                 h_shift: float = 0.0) -> tuple:
    """Heat-bath chains with + and - boundaries driven by the same uniforms.

    Returns the full trajectories (sweeps, |W|) of the plus and minus chains.
    """
    from .lattice import all_minus, all_plus

    d = window.dim
    up = HeatBath(phi, window, all_plus(d))
    down = HeatBath(phi, window, all_minus(d))
    plus = _run_chain(up, seed, 0, 0, sweeps, 0, 1, +1, record_all=True)
    minus = _run_chain(down, seed, 0, 0, sweeps, 0, 1, -1, record_all=True)
    return plus, minus


@dataclass(frozen=True)
class Estimate:
    mean: float
    standard_error: float


def empirical_estimate(stream: SampleStream, f: LocalFunction, batches: int = 20) -> Estimate:
    """Batch-means estimate of E[f] pooled over chains in chain order."""
    if not f.support.issubset(stream.window):
        raise ValueError("function support escapes the sampled window")
    vals = f.on(stream.window, stream.samples)  # (chains, n)
    return batch_means(vals, batches)


def batch_means(vals: np.ndarray, batches: int = 20) -> Estimate:
    vals = np.atleast_2d(vals)
    chains, n = vals.shape
    per = max(1, batches // chains)
    size = n // per
    if size == 0:
        raise ValueError("not enough samples for batch means")
    means = vals[:, : per * size].reshape(chains, per, size).mean(axis=2).ravel()
    mean = float(vals[:, : per * size].mean())
    if len(means) < 2 or np.all(means == means[0]):
        return Estimate(mean, 0.0)
    return Estimate(mean, float(means.std(ddof=1) / math.sqrt(len(means))))


def integrated_autocorrelation(vals: np.ndarray, max_lag: int | None = None) -> float:
    """Integrated autocorrelation time 1 + 2 sum_t rho(t), chains pooled, summed
    until the first nonpositive lag (initial positive sequence)."""
    vals = np.atleast_2d(np.asarray(vals, dtype=float))
    x = vals - vals.mean(axis=1, keepdims=True)
    var = float((x * x).mean())
    if var == 0.0:
        return 1.0
    n = x.shape[1]
    max_lag = min(max_lag or n // 4, n - 1)
    tau = 1.0
    for t in range(1, max_lag + 1):
        rho = float((x[:, :-t] * x[:, t:]).mean()) / var
        if rho <= 0:
            break
        tau += 2 * rho
    return tau
