"""Sites, regions, configurations with tails, and local functions on Z^d.

Configurations of a region are indexed canonically: with sites in
lexicographic order, configuration ``i`` has spin +1 at site ``j`` iff bit
``k - 1 - j`` of ``i`` is set.  This is the order produced by
``itertools.product([-1, 1], repeat=k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

Site = tuple  # tuple of ints, length d


def _as_site(x) -> tuple:
    if isinstance(x, (int, np.integer)):
        return (int(x),)
    return tuple(int(c) for c in x)


@dataclass(frozen=True)
class Region:
    """Ordered, duplicate-free set of sites of Z^d (d = 1 or 2)."""

    sites: tuple
    provenance: str = "explicit"

    def __post_init__(self):
        sites = tuple(sorted({_as_site(s) for s in self.sites}))
        if len(sites) != len(self.sites):
            raise ValueError("region has duplicate sites")
        dims = {len(s) for s in sites}
        if len(dims) > 1:
            raise ValueError("mixed site dimensions")
        object.__setattr__(self, "sites", sites)

    @classmethod
    def of(cls, sites: Iterable, provenance: str = "explicit") -> "Region":
        return cls(tuple(sorted({_as_site(s) for s in sites})), provenance)

    @property
    def dim(self) -> int:
        return len(self.sites[0]) if self.sites else 0

    def __len__(self) -> int:
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)

    def __contains__(self, x) -> bool:
        return _as_site(x) in self._index

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.sites)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def position(self, x) -> int:
        return self._index[_as_site(x)]

    def positions(self, other: "Region") -> np.ndarray:
        """Positions in ``self`` of the sites of ``other`` (which must be a subset)."""
        try:
            return np.array([self._index[s] for s in other.sites], dtype=int)
        except KeyError as exc:
            raise ValueError(f"site {exc.args[0]} not in region") from None

    def issubset(self, other: "Region") -> bool:
        return all(s in other for s in self.sites)

    def union(self, other: "Region") -> "Region":
        return Region.of(self.sites + other.sites)

    def minus(self, other: "Region") -> "Region":
        return Region.of([s for s in self.sites if s not in other], "annulus")

    def intersection(self, other: "Region") -> "Region":
        return Region.of([s for s in self.sites if s in other])

    def shifted(self, i) -> "Region":
        i = _as_site(i)
        return Region.of([tuple(a + b for a, b in zip(s, i)) for s in self.sites])

    def radius(self) -> int:
        """Sup-norm radius about the origin."""
        return max((max(abs(c) for c in s) for s in self.sites), default=0)

    def configurations(self) -> np.ndarray:
        return configurations(len(self))


def cube(n: int, d: int = 1) -> Region:
    """The cube [-n, n]^d as a region of (2n+1)^d sites."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if d not in (1, 2):
        raise ValueError("only d = 1, 2 are supported")
    r = range(-n, n + 1)
    sites = [(a,) for a in r] if d == 1 else [(a, b) for a in r for b in r]
    return Region(tuple(sites), f"cube({n})")


def annulus(outer: Region, inner: Region) -> Region:
    if not inner.issubset(outer):
        raise ValueError("inner region must be contained in outer region")
    return Region.of([s for s in outer.sites if s not in inner], "annulus")


@lru_cache(maxsize=32)
def _configurations(k: int) -> np.ndarray:
    idx = np.arange(2**k, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(k - 1, -1, -1)) & 1
    out = (2 * bits - 1).astype(np.int8)
    out.setflags(write=False)
    return out


def configurations(k: int) -> np.ndarray:
    """All 2^k spin configurations of k sites in canonical order, shape (2^k, k)."""
    if k > 26:
        raise ValueError(f"refusing to enumerate 2^{k} configurations")
    return _configurations(k)


def config_index(spins: np.ndarray) -> np.ndarray:
    """Canonical index of configurations given as a (..., k) array of ±1."""
    spins = np.asarray(spins)
    k = spins.shape[-1]
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    return ((spins > 0).astype(np.int64) * weights).sum(axis=-1)


# --- tails -----------------------------------------------------------------


@dataclass(frozen=True)
class Tail:
    """Exterior rule of a configuration.

    ``kind`` is one of ``plus``, ``minus``, ``periodic`` or ``named``.  A
    periodic tail evaluates ``pattern[x mod period]`` coordinatewise; a named
    tail delegates to a stored configuration.
    """

    kind: str
    pattern: tuple = ()
    period: tuple = ()
    ref: "TailedConfiguration | None" = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("plus", "minus", "periodic", "named"):
            raise ValueError(f"unknown tail kind {self.kind!r}")
        if self.kind == "periodic":
            pat = np.asarray(self.pattern, dtype=int)
            if pat.shape != tuple(self.period):
                raise ValueError("pattern shape must equal period")
            if not np.all(np.isin(pat, (-1, 1))):
                raise ValueError("pattern spins must be ±1")
        if self.kind == "named" and self.ref is None:
            raise ValueError("named tail needs a reference configuration")

    def value(self, x: tuple) -> int:
        if self.kind == "plus":
            return 1
        if self.kind == "minus":
            return -1
        if self.kind == "periodic":
            pat = self.pattern
            for c, p in zip(x, self.period):
                pat = pat[c % p]
            return int(pat)
        return self.ref.at(x)


def periodic_tail(pattern, name: str = "") -> Tail:
    arr = np.asarray(pattern, dtype=int)
    return Tail("periodic", _to_nested(arr), tuple(arr.shape), name=name)


def _to_nested(arr: np.ndarray):
    if arr.ndim == 1:
        return tuple(int(v) for v in arr)
    return tuple(_to_nested(a) for a in arr)


PLUS_TAIL = Tail("plus")
MINUS_TAIL = Tail("minus")


@dataclass(frozen=True)
class TailedConfiguration:
    """A spin configuration on all of Z^d: window values plus a tail rule."""

    window: Region
    values: tuple
    tail: Tail = PLUS_TAIL
    dim: int = 1

    def __post_init__(self):
        vals = tuple(int(v) for v in np.asarray(self.values).ravel())
        if len(vals) != len(self.window):
            raise ValueError("one value per window site required")
        if any(v not in (-1, 1) for v in vals):
            raise ValueError("spins must be ±1")
        object.__setattr__(self, "values", vals)
        if len(self.window):
            object.__setattr__(self, "dim", self.window.dim)

    def at(self, x) -> int:
        return self._at(_as_site(x))

    def _at(self, x: tuple) -> int:
        # x is already a canonical site tuple
        i = self.window._index.get(x)
        if i is not None:
            return self.values[i]
        return self.tail.value(x)

    def restrict(self, region: Region) -> np.ndarray:
        """Spins on ``region`` in canonical order."""
        return np.array([self.at(x) for x in region.sites], dtype=np.int8)


def constant(sign: int, d: int = 1) -> TailedConfiguration:
    tail = PLUS_TAIL if sign > 0 else MINUS_TAIL
    return TailedConfiguration(Region(()), (), tail, d)


def all_plus(d: int = 1) -> TailedConfiguration:
    return constant(+1, d)


def all_minus(d: int = 1) -> TailedConfiguration:
    return constant(-1, d)


def alternating(d: int = 1) -> TailedConfiguration:
    """The staggered configuration (-1)^{x_1 + ... + x_d}, +1 at the origin."""
    pattern = [1, -1] if d == 1 else [[1, -1], [-1, 1]]
    return TailedConfiguration(Region(()), (), periodic_tail(pattern, "alternating"), d)


def from_values(region: Region, values, tail: Tail = PLUS_TAIL) -> TailedConfiguration:
    return TailedConfiguration(region, tuple(np.asarray(values).ravel()), tail, region.dim or 1)


def splice(inner: TailedConfiguration, outer: TailedConfiguration, region: Region) -> TailedConfiguration:
    """The configuration equal to ``inner`` on ``region`` and ``outer`` elsewhere.

    Only ``region``'s values are read from ``inner``; they come from its
    window or its tail, so ``inner`` always covers ``region``.
    """
    if not isinstance(inner, TailedConfiguration):
        raise TypeError("inner must be a TailedConfiguration")
    win = region.union(outer.window)
    inside = region._index
    vals = [inner._at(x) if x in inside else outer._at(x) for x in win.sites]
    return TailedConfiguration(win, tuple(vals), outer.tail, outer.dim)


def splice_values(region: Region, values, outer: TailedConfiguration) -> TailedConfiguration:
    """``values`` on ``region`` (array in canonical order), ``outer`` elsewhere."""
    return splice(from_values(region, values), outer, region)


def compare(a: TailedConfiguration, b: TailedConfiguration, horizon: Region) -> str:
    """Coordinatewise order restricted to ``horizon``: '=', '<=', '>=' or 'incomparable'."""
    sa, sb = a.restrict(horizon), b.restrict(horizon)
    le = bool(np.all(sa <= sb))
    ge = bool(np.all(sa >= sb))
    if le and ge:
        return "="
    if le:
        return "<="
    if ge:
        return ">="
    return "incomparable"


# --- local functions and interactions --------------------------------------


@dataclass(frozen=True)
class LocalFunction:
    """A function of the spins in ``support``, tabulated in canonical order."""

    support: Region
    table: np.ndarray = field(compare=False)

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float).copy()
        if table.shape != (2 ** len(self.support),):
            raise ValueError("table must have one entry per support configuration")
        if not np.all(np.isfinite(table)):
            raise ValueError("table values must be finite")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @classmethod
    def from_callable(cls, support: Region, fn) -> "LocalFunction":
        cfgs = configurations(len(support))
        return cls(support, np.array([fn(c) for c in cfgs], dtype=float))

    def __call__(self, omega: TailedConfiguration) -> float:
        return float(self.table[config_index(omega.restrict(self.support))])

    def on(self, region: Region, spins: np.ndarray) -> np.ndarray:
        """Evaluate on configurations of a larger ``region`` given as (n, |region|) spins."""
        pos = region.positions(self.support)
        return self.table[config_index(np.asarray(spins)[..., pos])]

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.table))) if self.table.size else 0.0


def spin(site=(0,)) -> LocalFunction:
    site = _as_site(site)
    return LocalFunction(Region((site,)), np.array([-1.0, 1.0]))


def spin_product(sites: Sequence) -> LocalFunction:
    reg = Region.of(sites)
    return LocalFunction(reg, np.prod(configurations(len(reg)), axis=1).astype(float))


def indicator(region: Region, accept) -> LocalFunction:
    """0/1 local function; ``accept`` maps a spin array to bool."""
    return LocalFunction.from_callable(region, lambda c: 1.0 if accept(c) else 0.0)


def constant_function(c: float, d: int = 1) -> LocalFunction:
    return LocalFunction(Region(()), np.array([float(c)]))


def translate_site(x: tuple, i: tuple) -> tuple:
    return tuple(a + b for a, b in zip(x, i))


def translate(obj, i, bound: int | None = None):
    """The translation tau_i acting on configurations, local functions or finite measures.

    (tau_i omega)_x = omega_{x - i}; tau_i f(omega) = f(tau_{-i} omega), so the
    support of tau_i f is the support of f shifted by +i.
    """
    i = _as_site(i)
    if isinstance(obj, TailedConfiguration):
        if obj.tail.kind == "named":
            tail = Tail("named", ref=translate(obj.tail.ref, i, bound))
        elif obj.tail.kind == "periodic":
            pat = np.asarray(obj.tail.pattern)
            tail = periodic_tail(np.roll(pat, shift=i[: pat.ndim], axis=tuple(range(pat.ndim))), obj.tail.name)
        else:
            tail = obj.tail
        win = obj.window.shifted(i)
        _check_bound(win, bound)
        # shifted window keeps lexicographic order, so values carry over
        return TailedConfiguration(win, obj.values, tail, obj.dim)
    support = getattr(obj, "support", None)
    if support is None:
        raise TypeError(f"cannot translate {type(obj).__name__}")
    new_support = support.shifted(i)
    _check_bound(new_support, bound)
    return type(obj)(new_support, obj.table if isinstance(obj, LocalFunction) else obj.probabilities)


def _check_bound(region: Region, bound):
    if bound is not None and region.radius() > bound:
        raise ValueError("translated support leaves the representable window")


@dataclass(frozen=True)
class Interaction:
    """Nearest-neighbour Ising interaction: weight exp(beta [J sum s_x s_y + h sum s_x])."""

    J: float = 1.0
    h: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not all(np.isfinite([self.J, self.h, self.beta])):
            raise ValueError("interaction parameters must be finite")

    @property
    def range(self) -> int:
        return 1


def neighbours(x: tuple) -> list:
    out = []
    for a in range(len(x)):
        for s in (-1, 1):
            y = list(x)
            y[a] += s
            out.append(tuple(y))
    return out


@lru_cache(maxsize=4096)
def outer_boundary(region: Region) -> Region:
    """Sites outside ``region`` adjacent to it."""
    return Region.of({y for x in region.sites for y in neighbours(x) if y not in region})
