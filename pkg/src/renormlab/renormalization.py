"""Block-spin transformations, exact pushforwards and renormalized conditionals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from .engines import ColumnChain, Estimate, ImageFactor, MarkovChain1D, RunManifest, batch_means, mc_sample
from .lattice import (
    Interaction,
    LocalFunction,
    Region,
    TailedConfiguration,
    config_index,
    configurations,
    cube,
    from_values,
    outer_boundary,
    splice,
)
from .specification import FiniteMeasure, GibbsSpecification, KernelTable

KINDS = ("decimation", "projection", "kadanoff", "majority", "noisy_projection")
DETERMINISTIC = ("decimation", "projection", "majority")


def single_site_kernel_prob(kind: str, p, block_sum, image_spin: int, block_size: int | None = None):
    """T_x'(image_spin | block) as a function of the block sum.

    Kadanoff and noisy kinds give exp(p w s) / (2 cosh(p s)); deterministic
    kinds give the 0/1 indicator (majority splits ties evenly).
    """
    s = np.asarray(block_sum)
    if block_size is not None:
        if np.any(np.abs(s) > block_size) or np.any((s + block_size) % 2):
            raise ValueError(f"block sum {block_sum} not attainable for block size {block_size}")
    if kind in ("kadanoff", "noisy_projection"):
        out = expit(2.0 * p * image_spin * s)
    elif kind in ("decimation", "projection"):
        out = (s == image_spin).astype(float)
    elif kind == "majority":
        out = np.where(s * image_spin > 0, 1.0, np.where(s == 0, 0.5, 0.0))
    else:
        raise ValueError(f"unknown transformation kind {kind!r}")
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Transformation:
    """A product block-spin transformation on Z^d.

    ``domain`` selects the kept set for projection kinds: ``sublattice`` is
    bZ^d (decimation when deterministic), ``layer`` the line x_d = 0 with
    image sites labelled by their first d-1 coordinates.
    """

    kind: str
    d: int = 1
    b: int = 1
    p: float | None = None
    domain: str = "sublattice"
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transformation kind {self.kind!r}")
        if self.kind in DETERMINISTIC and self.p is not None:
            raise ValueError("deterministic kinds take no noise parameter")
        if self.kind not in DETERMINISTIC and self.p is None:
            raise ValueError("noisy kinds need a parameter p")
        if self.domain not in ("sublattice", "layer"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "layer" and (self.kind not in ("projection", "noisy_projection") or self.d < 2):
            raise ValueError("layer domain applies to projections with d >= 2")
        if self.b < 1:
            raise ValueError("block size must be positive")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.default_alpha())
        if self.alpha <= 0:
            raise ValueError("compression factor must be positive")

    # catalogue
    @classmethod
    def decimation(cls, b: int, d: int = 1) -> "Transformation":
        return cls("decimation", d, b)

    @classmethod
    def projection(cls, d: int = 2, domain: str = "layer") -> "Transformation":
        return cls("projection", d, 1, domain=domain)

    @classmethod
    def kadanoff(cls, p: float, b: int, d: int = 1) -> "Transformation":
        return cls("kadanoff", d, b, p)

    @classmethod
    def majority(cls, b: int, d: int = 1) -> "Transformation":
        return cls("majority", d, b)

    @classmethod
    def noisy_projection(cls, p: float, b: int = 1, d: int = 1, domain: str = "sublattice") -> "Transformation":
        return cls("noisy_projection", d, b, p, domain)

    @classmethod
    def noisy_decimation(cls, p: float, b: int, d: int = 1) -> "Transformation":
        return cls("noisy_projection", d, b, p)

    @property
    def deterministic(self) -> bool:
        return self.kind in DETERMINISTIC

    @property
    def image_dim(self) -> int:
        return self.d - 1 if self.domain == "layer" else self.d

    @property
    def has_blocks(self) -> bool:
        return self.kind in ("kadanoff", "majority")

    def default_alpha(self) -> float:
        if self.domain == "layer":
            return 1.0
        return float(2 * self.b - 1) if self.has_blocks else float(self.b)

    def block(self, xp) -> Region:
        """Sites whose spins the factor at image site ``xp`` reads."""
        xp = tuple(xp)
        if self.domain == "layer":
            return Region.of([xp + (0,)], "block")
        base = tuple(self.b * c for c in xp)
        if not self.has_blocks:
            return Region.of([base], "block")
        offs = np.array(np.meshgrid(*[np.arange(self.b)] * self.d, indexing="ij")).reshape(self.d, -1).T
        return Region.of([tuple(int(v) for v in np.add(base, o)) for o in offs], "block")

    def cell(self, xp) -> Region:
        """Partition cell attached to ``xp``; cells must tile the source lattice."""
        xp = tuple(xp)
        if self.domain == "layer":
            return self.block(xp)
        base = tuple(self.b * c for c in xp)
        offs = np.array(np.meshgrid(*[np.arange(self.b)] * self.d, indexing="ij")).reshape(self.d, -1).T
        return Region.of([tuple(int(v) for v in np.add(base, o)) for o in offs], "cell")

    def owners(self, x) -> list:
        """Image sites whose block contains source site ``x``."""
        x = tuple(x)
        if self.domain == "layer":
            return [x[:-1]] if x[-1] == 0 else []
        xp = tuple(c // self.b for c in x)
        if self.has_blocks or all(c % self.b == 0 for c in x):
            return [xp]
        return []

    def image_sites(self, source: Region) -> Region:
        """Image sites whose whole block lies in ``source``."""
        cands = {xp for x in source.sites for xp in self.owners(x)}
        return Region.of([xp for xp in cands if self.block(xp).issubset(source)], "image")

    def preimage(self, image: Region) -> Region:
        sites = set()
        for xp in image.sites:
            sites.update(self.block(xp).sites)
        return Region.of(sites, "preimage")

    def prob(self, image_spin: int, block_sum):
        return single_site_kernel_prob(self.kind, self.p, block_sum, image_spin)

    def factor_probs(self, spins: np.ndarray, source: Region, image: Region) -> np.ndarray:
        """P(image spin = +1 | source config) per image site, shape (n, |image|)."""
        spins = np.atleast_2d(spins)
        out = np.empty((len(spins), len(image)))
        for j, xp in enumerate(image.sites):
            s = spins[:, source.positions(self.block(xp))].sum(axis=1)
            out[:, j] = self.prob(1, s)
        return out


def _image_law(plus: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sum_c weights[c] prod_j T(w_j | c) over image configurations w (product order)."""
    law = weights[:, None]
    for j in range(plus.shape[1]):
        pj = plus[:, j][:, None]
        law = np.concatenate([law * (1.0 - pj), law * pj], axis=1)
        # keep configuration order: site j becomes the least significant so far
        n = law.shape[1] // 2
        law = law.reshape(len(weights), 2, n).transpose(0, 2, 1).reshape(len(weights), 2 * n)
    return law.sum(axis=0)


def pushforward(mu: FiniteMeasure, T: Transformation, image: Region | None = None) -> FiniteMeasure:
    """Exact image law (mu T) on ``image`` (default: every image site with its block in mu's window)."""
    src = mu.support
    if image is None:
        image = T.image_sites(src)
    for xp in image.sites:
        if not T.block(xp).issubset(src):
            raise ValueError(f"block of image site {xp} escapes the source window")
    plus = T.factor_probs(configurations(len(src)), src, image)
    law = _image_law(plus, mu.probabilities)
    return FiniteMeasure(image, law / law.sum())


# --- block-spin property checks ---------------------------------------------


@dataclass(frozen=True)
class BlockSpinReport:
    strict_locality: bool
    alpha_estimate: float
    locality_witness: tuple | None
    factorization: bool
    factorization_residual: float
    factorization_witness: tuple | None


def block_spin_check(T: Transformation, probes: list | None = None, n_max: int = 3) -> BlockSpinReport:
    """Check strict locality and factorization on image probe volumes.

    Strict locality needs the preimage of the image cube of radius n inside
    the source cube of radius alpha*n, and the cells of image cubes to cover
    the source cubes of matching size.  Factorization compares T(A'B'|w) with
    T(A'|w)T(B'|w) for single-site events more than alpha apart, on every
    source configuration of the two blocks.
    """
    dim = T.image_dim
    if probes is None:
        probes = [cube(n, dim) for n in range(1, n_max + 1)]
    alpha_est = 0.0
    witness = None
    ok = True
    for vol in probes:
        n = max(vol.radius(), 1)
        pre = T.preimage(vol)
        alpha_est = max(alpha_est, pre.radius() / n)
        covered = set()
        for xp in vol.sites:
            covered.update(T.cell(xp).sites)
        src = cube(n, T.d)
        uncovered = [x for x in src.sites if x not in covered]
        if uncovered and witness is None:
            witness = ("uncovered", uncovered[0])
            ok = False
        if pre.radius() > T.alpha * n and witness is None:
            witness = ("preimage", n, pre.radius())
            ok = False
    # factorization
    worst, fwit = 0.0, None
    far = int(math.floor(T.alpha)) + 1
    for xp, yp in [((0,) * dim, (far,) + (0,) * (dim - 1)), ((0,) * dim, (far + 1,) * dim)]:
        src = T.block(xp).union(T.block(yp))
        img = Region.of([xp, yp])
        cfg = configurations(len(src))
        for w, s in enumerate(cfg):
            law = pushforward(FiniteMeasure.point_mass(src, s), T, img).probabilities
            ia, ib = img.position(xp), img.position(yp)
            ic = configurations(2)
            pa = law[ic[:, ia] > 0].sum()
            pb = law[ic[:, ib] > 0].sum()
            pab = law[(ic[:, ia] > 0) & (ic[:, ib] > 0)].sum()
            r = abs(pab - pa * pb)
            if r > worst:
                worst, fwit = r, (xp, yp, w)
    return BlockSpinReport(ok, alpha_est, witness, worst < 1e-12, worst, fwit)


# --- the joint kernel gamma (x) T -------------------------------------------


def _tag(region: Region, tag: int, d: int) -> list:
    return [(tag,) + tuple(x) + (0,) * (d - len(x)) for x in region.sites]


@dataclass(frozen=True)
class JointKernel:
    """Joint law of source spins on Lambda and image spins on Lambda'.

    ``measure`` lives on tagged sites: (0, x) for source and (1, x') for image
    sites, so all source bits precede image bits in configuration order.
    """

    source_volume: Region
    image_volume: Region
    measure: FiniteMeasure = field(compare=False)

    def source_marginal(self) -> FiniteMeasure:
        k, kp = len(self.source_volume), len(self.image_volume)
        p = self.measure.probabilities.reshape(2**k, 2**kp).sum(axis=1)
        return FiniteMeasure(self.source_volume, p)

    def image_marginal(self) -> FiniteMeasure:
        k, kp = len(self.source_volume), len(self.image_volume)
        p = self.measure.probabilities.reshape(2**k, 2**kp).sum(axis=0)
        return FiniteMeasure(self.image_volume, p)


def _coupled_sites(T: Transformation, region: Region, image: Region) -> list:
    """Image sites x' outside Lambda' whose block meets Lambda."""
    out = set()
    for x in region.sites:
        out.update(T.owners(x))
    return sorted(xp for xp in out if xp not in image)


def _joint_weights(gamma_row: np.ndarray, T: Transformation, region: Region, image: Region,
                   ext_src: dict, fixed: dict) -> np.ndarray:
    k, kp = len(region), len(image)
    cfg = configurations(k)
    w = gamma_row[:, None] * np.ones((1, 2**kp))
    icfg = configurations(kp)

    def block_sums(xp):
        blk = T.block(xp)
        inside = [x for x in blk.sites if x in region]
        s = np.zeros(len(cfg))
        if inside:
            s = s + cfg[:, region.positions(Region.of(inside))].sum(axis=1)
        return s + sum(ext_src[x] for x in blk.sites if x not in region)

    for j, xp in enumerate(image.sites):
        pp = T.prob(1, block_sums(xp))
        w = w * np.where(icfg[None, :, j] > 0, pp[:, None], 1.0 - pp[:, None])
    for xp, v in fixed.items():
        w = w * T.prob(v, block_sums(xp))[:, None]
    return w


def joint_kernel(gamma: GibbsSpecification, T: Transformation, region: Region, image: Region,
                 omega: TailedConfiguration, omega_image: TailedConfiguration,
                 cap: int = 2**20) -> JointKernel:
    """The product of gamma_Lambda(.|omega) with T-factors for every image site in
    Lambda' or whose block meets Lambda; factors outside Lambda' use ``omega_image``."""
    if 2 ** (len(region) + len(image)) > cap:
        raise ValueError("joint state space exceeds the enumeration cap")
    row = gamma.kernel(region, omega).probabilities
    coupled = _coupled_sites(T, region, image)
    blocks = set()
    for xp in list(image.sites) + coupled:
        blocks.update(T.block(xp).sites)
    ext = {x: omega.at(x) for x in blocks if x not in region}
    fixed = {xp: omega_image.at(xp) for xp in coupled}
    w = _joint_weights(row, T, region, image, ext, fixed)
    d = max(T.d, 1)
    tagged = Region.of(_tag(region, 0, d) + _tag(image, 1, d), "joint")
    return JointKernel(region, image, FiniteMeasure(tagged, (w / w.sum()).ravel()))


def joint_kernel_table(gamma: GibbsSpecification, T: Transformation, region: Region,
                       image: Region) -> KernelTable:
    """Rows of gamma (x) T over every configuration of its dependence set."""
    d = max(T.d, 1)
    coupled = _coupled_sites(T, region, image)
    blocks = set()
    for xp in list(image.sites) + coupled:
        blocks.update(T.block(xp).sites)
    src_dep = Region.of(set(outer_boundary(region).sites) | {x for x in blocks if x not in region})
    img_dep = Region.of(coupled) if coupled else Region.of([], "empty")
    dep = Region.of(_tag(src_dep, 0, d) + (_tag(img_dep, 1, d) if coupled else []), "joint-dependence")
    vol = Region.of(_tag(region, 0, d) + _tag(image, 1, d), "joint")
    m = len(dep)
    if m > 20:
        raise ValueError("dependence set too large to tabulate")
    dcfg = configurations(m)
    n_src = len(src_dep)
    nb = outer_boundary(region)
    grows = gamma.rows(region, dcfg[:, src_dep.positions(nb)])
    rows = np.empty((2**m, 2 ** len(vol)))
    for i in range(2**m):
        ext = dict(zip(src_dep.sites, dcfg[i, :n_src].tolist()))
        fixed = dict(zip(coupled, dcfg[i, n_src:].tolist()))
        w = _joint_weights(grows[i], T, region, image, ext, fixed)
        rows[i] = (w / w.sum()).ravel()
    return KernelTable(vol, dep, rows)


# --- exact renormalized conditionals on strips ------------------------------


class RenormalizedStrip:
    """Image of the Ising model on Z x {0..w-1} under T, as a hidden Markov chain.

    The hidden state at step k is the block of source columns mapped to the
    image sites with first coordinate k; image spins are emissions.  In
    d = 1 use ``width=1``.  Exterior fills are applied out to ``horizon``
    steps, beyond which the chain runs free.
    """

    def __init__(self, phi: Interaction, T: Transformation, width: int = 1,
                 horizon: int = 256, periodic_transverse: bool | None = None):
        if T.d == 1 and width != 1:
            raise ValueError("d = 1 strips have width 1")
        if T.d > 2:
            raise ValueError("strips are available for d <= 2")
        if T.domain != "layer" and T.d == 2 and width % T.b:
            raise ValueError("strip width must be a multiple of the block size")
        self.phi, self.T, self.width, self.horizon = phi, T, width, horizon
        step = 1 if T.domain == "layer" else T.b
        self.chain = ColumnChain(phi, width, step, periodic_transverse)
        self.step = step
        if T.d == 1:
            self.step_sites = [(0,)]
        elif T.domain == "layer":
            self.step_sites = [(0,)]
        else:
            self.step_sites = [(0, r) for r in range(width // T.b)]
        spins = self.chain.block_spins()  # (n, step, width)
        self.plus = np.empty((self.chain.n_states, len(self.step_sites)))
        for j, xp in enumerate(self.step_sites):
            blk = T.block(xp)
            s = np.zeros(self.chain.n_states)
            for x in blk.sites:
                col, row = x[0], (x[1] if T.d == 2 else 0)
                s = s + spins[:, col, row]
            self.plus[:, j] = T.prob(1, s)
        self.manifest = RunManifest("strip-hmm", model=asdict(phi),
                                    extra={"transformation": repr(T), "width": width, "horizon": horizon})

    @property
    def image_dim(self) -> int:
        return self.T.image_dim

    def site(self, k: int, j: int) -> tuple:
        xp = self.step_sites[j]
        return (xp[0] + k,) + tuple(xp[1:])

    @cached_property
    def _cache(self) -> dict:
        return {}

    @cached_property
    def _fills(self) -> dict:
        return {}

    def likelihood(self, values) -> np.ndarray:
        """Emission probability of step values (None = unobserved) for each hidden state."""
        key = tuple(values)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        L = np.ones(self.chain.n_states)
        for j, v in enumerate(values):
            if v is None:
                continue
            L = L * (self.plus[:, j] if v > 0 else 1.0 - self.plus[:, j])
        self._cache[key] = L
        return L

    def step_values(self, k: int, config: TailedConfiguration) -> tuple:
        return tuple(int(config.at(self.site(k, j))) for j in range(len(self.step_sites)))

    def _fill_messages(self, theta: TailedConfiguration, M: int, H: int):
        """Messages entering step -M (from the left) and step M (from the right) under the fill."""
        key = (_config_key(theta), M, H)
        hit = self._fills.get(key)
        if hit is not None:
            return hit
        Q = self.chain.transition
        a = self.chain.stationary.copy()
        for k in range(-H, -M):
            a = (a @ Q) * self.likelihood(self.step_values(k, theta))
            a /= a.sum()
        bvec = np.ones(self.chain.n_states)
        for k in range(H, M, -1):
            bvec = Q @ (self.likelihood(self.step_values(k, theta)) * bvec)
            bvec /= bvec.sum()
        self._fills[key] = (a, bvec)
        return a, bvec

    def _messages(self, omega, theta, M: int, H: int):
        Q = self.chain.transition
        a, bvec = self._fill_messages(theta, M, H)
        for k in range(-M, 0):
            a = (a @ Q) * self.likelihood(self.step_values(k, omega))
            a /= a.sum()
        for k in range(M, 0, -1):
            bvec = Q @ (self.likelihood(self.step_values(k, omega)) * bvec)
            bvec /= bvec.sum()
        return a @ Q, bvec

    def filled_kernel(self, region: Region, omega: TailedConfiguration, M: int,
                      theta: TailedConfiguration, horizon: int | None = None) -> FiniteMeasure:
        """Law of image spins on ``region`` (inside step 0) given omega on
        steps 1..M (and the rest of step 0) and theta beyond M."""
        H = horizon or self.horizon
        if M > H:
            raise ValueError("M must not exceed the horizon")
        cols = [j for j in range(len(self.step_sites)) if self.site(0, j) in region]
        if len(cols) != len(region):
            raise ValueError("image volume must lie in the step at the origin")

        pred, bvec = self._messages(omega, theta, M, H)
        base = list(self.step_values(0, omega))
        law = np.empty(2 ** len(region))
        for c, cfg in enumerate(configurations(len(region))):
            vals = list(base)
            for j, v in zip(cols, cfg):
                vals[j] = int(v)
            law[c] = float(pred @ (self.likelihood(vals) * bvec))
        return FiniteMeasure(region, law / law.sum())

    def kernel(self, region: Region, omega: TailedConfiguration) -> FiniteMeasure:
        """Conditional law given omega out to the horizon."""
        return self.filled_kernel(region, omega, self.horizon, omega)

    def image_marginal(self, steps: int) -> FiniteMeasure:
        """Exact law of the image spins on steps 0..steps-1."""
        nj = len(self.step_sites)
        k = steps * nj
        if k > 20:
            raise ValueError("image marginal too large to tabulate")
        sites = [self.site(s, j) for s in range(steps) for j in range(nj)]
        region = Region.of(sites)
        order = region.positions(Region.of(sites))  # ensures (step, row) order matches sorted order
        Q = self.chain.transition
        # alpha over (configuration so far, state)
        alpha = self.chain.stationary[None, :]
        for s in range(steps):
            if s > 0:
                alpha = alpha @ Q
            for j in range(nj):
                pj = self.plus[:, j][None, :]
                alpha = np.concatenate([alpha * (1 - pj), alpha * pj], axis=0)
                n = alpha.shape[0] // 2
                alpha = alpha.reshape(2, n, -1).transpose(1, 0, 2).reshape(2 * n, -1)
        law = alpha.sum(axis=1)
        assert np.array_equal(order, np.arange(k))
        return FiniteMeasure(region, law / law.sum())

    def marginal(self, region: Region) -> FiniteMeasure:
        """Exact image law on ``region``, read off the span of steps it touches."""
        steps = sorted({x[0] for x in region.sites})
        lo, hi = steps[0], steps[-1]
        law = self.image_marginal(hi - lo + 1)
        shifted = Region.of([(x[0] - lo,) + tuple(x[1:]) for x in region.sites])
        sub = law.marginal(shifted)
        return FiniteMeasure(region, sub.probabilities)

    def sample(self, region: Region, n: int, seed: int = 0) -> np.ndarray:
        """Exact samples of the image spins on ``region``, shape (n, |region|)."""
        steps = sorted({x[0] for x in region.sites})
        lo, hi = steps[0], steps[-1]
        raw = self.sample_image(hi - lo + 1, seed, n)
        cols = [(x[0] - lo) * len(self.step_sites) + self._row(x) for x in region.sites]
        return raw.reshape(n, -1)[:, cols]

    def _row(self, x) -> int:
        return int(x[1]) if len(self.step_sites) > 1 else 0

    def sample_image(self, steps: int, seed: int = 0, n: int = 1, offset: int = 0) -> np.ndarray:
        """Exact samples of image spins on steps offset..offset+steps-1, shape (n, steps, rows)."""
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
        Q = np.cumsum(self.chain.transition, axis=1)
        pi = np.cumsum(self.chain.stationary)
        out = np.empty((n, steps, len(self.step_sites)), dtype=np.int8)
        for i in range(n):
            s = min(int(np.searchsorted(pi, rng.random(), side="right")), len(pi) - 1)
            for k in range(steps):
                if k > 0:
                    s = min(int(np.searchsorted(Q[s], rng.random(), side="right")), len(pi) - 1)
                u = rng.random(len(self.step_sites))
                out[i, k] = np.where(u < self.plus[s], 1, -1)
        return out


def _config_key(cfg: TailedConfiguration) -> tuple:
    return (cfg.window.sites, np.asarray(cfg.values).tobytes(), repr(cfg.tail), cfg.dim)


# --- renormalized conditionals ----------------------------------------------


@dataclass(frozen=True)
class ConditionalEstimate:
    mean: float
    standard_error: float
    engine: str
    manifest: RunManifest | None = field(default=None, compare=False)


def renormalized_conditional(phi: Interaction, T: Transformation, image: Region,
                             annulus: TailedConfiguration, M: int, fill: TailedConfiguration,
                             f: LocalFunction, engine: str = "exact", width: int = 1,
                             horizon: int = 256, seed: int = 0, chains: int = 4,
                             sweeps: int = 4000, burn_in: int = 400, pad: int = 2,
                             threads: int | None = None) -> ConditionalEstimate:
    """Conditional expectation of f' under the renormalized measure given the
    annulus configuration on the image cube of radius M and ``fill`` beyond.

    ``exact`` uses the strip hidden-Markov engine; ``mc`` runs constrained
    heat-bath chains on the source cube of radius b(M + pad) with ``fill``
    as source boundary.
    """
    if not f.support.issubset(image):
        raise ValueError("f must be supported in the image volume")
    if engine == "exact":
        strip = RenormalizedStrip(phi, T, width, horizon)
        law = strip.filled_kernel(image, annulus, M, fill)
        return ConditionalEstimate(law.expect(f), 0.0, "exact", strip.manifest)
    if engine != "mc":
        raise ValueError(f"unknown engine {engine!r}")
    R = M + pad
    img_all = cube(R, T.image_dim) if T.domain != "layer" else cube(R, 1)
    window = T.preimage(img_all).union(cube(T.b * R + T.b - 1, T.d) if T.domain != "layer" else cube(R, T.d))
    constraints, factors = {}, []
    for xp in img_all.sites:
        if xp in image:
            continue
        v = int(annulus.at(xp) if max(abs(c) for c in xp) <= M else fill.at(xp))
        blk = T.block(xp)
        if T.kind in ("decimation", "projection"):
            constraints[blk.sites[0]] = v
        else:
            factors.append(ImageFactor(blk.sites, v, T.prob))
    stream = mc_sample(phi, window, fill, constraints, seed=seed, chains=chains, sweeps=sweeps,
                       burn_in=burn_in, factors=tuple(factors), threads=threads)
    plus = T.factor_probs(stream.samples.reshape(-1, len(window)), window, image)
    icfg = configurations(len(image))
    fvals = f.on(image, icfg)
    g = np.zeros(len(plus))
    for c, cfg in enumerate(icfg):
        g += fvals[c] * np.prod(np.where(cfg[None, :] > 0, plus, 1.0 - plus), axis=1)
    est = batch_means(g.reshape(stream.samples.shape[:2]))
    return ConditionalEstimate(est.mean, est.standard_error, "mc", stream.manifest)


def site_transfer_conditional(phi: Interaction, T: Transformation, omega: TailedConfiguration,
                              M: int, theta: TailedConfiguration, horizon: int = 256) -> float:
    """P(image spin at 0 = +1 | omega on 1 <= |k| <= M, theta on M < |k| <= horizon), d = 1.

    Walks the source chain one site at a time with 2 x 2 transfer products;
    an independent route to the strip engine for single-site blocks.
    """
    if T.d != 1 or T.has_blocks and T.b > 1:
        raise ValueError("site transfer oracle needs d = 1 and single-site blocks")
    P = MarkovChain1D.gibbs(phi).transition
    pi = MarkovChain1D.gibbs(phi).stationary
    states = np.array([-1, 1])
    b = T.b

    def emission(k):
        if k == 0:
            return np.ones(2)
        src = omega if abs(k) <= M else theta
        return np.asarray(T.prob(src.at((k,)), states), dtype=float)

    a = pi * emission(-horizon)
    for x in range(-horizon * b + 1, 1):
        a = a @ P
        if x % b == 0:
            a = a * emission(x // b)
        a /= a.sum()
    r = emission(horizon)
    for x in range(horizon * b - 1, -1, -1):
        r = P @ r
        if x % b == 0 and x > 0:
            r = r * emission(x // b)
        r /= r.sum()
    post = a * r
    post /= post.sum()
    return float(post @ np.asarray(T.prob(1, states), dtype=float))
