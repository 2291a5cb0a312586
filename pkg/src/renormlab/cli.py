"""Experiment runner: one subcommand per diagnostic, INI configs, CSV + JSON output.

    renormlab <subcommand> --config run.ini [--out dir] [--seed u64] [--threads n]

Exit codes: 0 ok, 2 invalid config, 3 engine failure, 4 contract violation.
A JSON manifest written by a previous run is accepted as ``--config``.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .engines import EngineError, MarkovChain1D
from .lattice import (
    Interaction,
    LocalFunction,
    Region,
    all_minus,
    all_plus,
    alternating,
    constant_function,
    cube,
    spin,
    spin_product,
)
from .quasilocality import (
    M_MAX,
    TailFamily,
    bad_set_probability,
    chi,
    continuity_rate,
    counterexample_f,
    default_probes,
    directional_delta,
    family_separation,
    kernel_function,
    prop1_bound,
    variation_at,
)
from .renormalization import (
    RenormalizedStrip,
    Transformation,
    block_spin_check,
    joint_kernel_table,
    pushforward,
    renormalized_conditional,
    site_transfer_conditional,
)
from .specification import (
    GibbsSpecification,
    axiom_sweep,
    dlr_residual,
    monotonicity_check,
)
from .thermo import (
    BoxGibbs,
    ProductMeasure,
    cm_term,
    csiszar_gap,
    decoupling_profile,
    entropy_density_series,
    entropy_lower_bound,
    legendre_gap,
    markov_entropy_rate,
    markov_pressure,
    markov_relative_entropy,
    pressure_estimate,
    tilted_chain,
    trial_value,
)

EXIT_CONFIG, EXIT_ENGINE, EXIT_CONTRACT = 2, 3, 4
THREADS_ENV = "RENORMLAB_THREADS"


class ConfigError(ValueError):
    pass


# --- schema --------------------------------------------------------------------


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _strs(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v for v in str(text).replace(",", " ").split())


def _seed(text) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


COMMON = {
    "model": {"d": (int, 1), "beta": (float, 1.0), "J": (float, 1.0), "h": (float, 0.0)},
    "engine": {
        "kind": (str, "exact"),
        "seed": (_seed, 0),
        "chains": (int, 4),
        "sweeps": (int, 2000),
        "burn_in": (int, 200),
        "samples": (int, 2000),
        "horizon": (int, 256),
        "width": (int, 1),
    },
    "output": {"directory": (str, "out"), "formats": (_strs, ("csv", "json"))},
}

_TRANSFORM = {"transform": (str, "decimation"), "b": (int, 2), "p": (float, 0.8)}

SCENARIOS = {
    "kernel-check": {"radius": (int, 1), "dlr_radius": (int, 1), "mono_radius": (int, 0)},
    "decimate": dict(_TRANSFORM, image_radius=(int, 1), boundary=(str, "plus")),
    "pressure": {"f": (str, "spin"), "coefficient": (float, 1.0), "nu": (str, "product:0.5"),
                 "n_min": (int, 0), "n_max": (int, 4), "periodic": (_bool, False)},
    "entropy-density": {"mu": (str, "gibbs"), "nu": (str, "gibbs"), "n_min": (int, 0), "n_max": (int, 6),
                        "box": (int, 1), "boundary": (str, "plus")},
    "variational-check": {"f": (str, "pair"), "coefficient": (float, 1.0), "nu": (str, "gibbs"),
                          "family": (str, "markov1"), "tolerance": (float, 1e-9)},
    "decoupling": dict(_TRANSFORM, transform=(str, "none"), nu=(str, "gibbs"), n=(int, 1),
                       gaps=(_ints, (0, 1, 2, 4)), family=(str, "single-site")),
    "quasilocality-scan": dict(_TRANSFORM, omega=(str, "alternating"), Ms=(_ints, (1, 2, 3, 4, 5, 6, 7, 8)),
                               M_ref=(int, 16), oracle=(_bool, True), epsilon=(float, 0.0),
                               badset_engine=(str, "exact"), badset_M_ref=(int, 4)),
    "cm-term": dict(_TRANSFORM, transform=(str, "kadanoff"), b=(int, 1), target=(str, "image"),
                    mu_beta=(float, 0.5), theta=(str, "plus"),
                    Ms=(_ints, (1, 2, 3)), M_ref=(int, 5)),
    "prop1-bound": {"mu": (str, "gibbs:1.0"), "nu": (str, "gibbs:0.5"), "Ms": (_ints, (1, 2, 3, 4, 5, 6)),
                    "c": (float, 1.0), "delta": (float, 0.5), "alpha_scale": (float, 1.0)},
    "counterexample": {"ns": (_ints, (0, 1, 10, 100, 1000)), "m_max": (int, M_MAX), "probe_count": (int, 20)},
}

SUBCOMMANDS = tuple(SCENARIOS)

# public operations of the diagnostic modules and the subcommand exercising each
COVERAGE = {
    "thermo": {
        "ProductMeasure": "pressure",
        "BoxGibbs": "entropy-density",
        "relative_entropy": "entropy-density",
        "markov_relative_entropy": "entropy-density",
        "markov_entropy_rate": "entropy-density",
        "EntropySeries": "entropy-density",
        "entropy_density_series": "entropy-density",
        "PressureSeries": "pressure",
        "finite_pressure": "pressure",
        "markov_finite_pressure": "pressure",
        "markov_pressure": "pressure",
        "pressure_estimate": "pressure",
        "csiszar_gap": "entropy-density",
        "DecouplingProfile": "decoupling",
        "decoupling_constant": "decoupling",
        "decoupling_profile": "decoupling",
        "LegendreResult": "variational-check",
        "trial_value": "variational-check",
        "tilted_chain": "variational-check",
        "legendre_gap": "variational-check",
        "entropy_lower_bound": "variational-check",
        "CMResult": "cm-term",
        "cm_term": "cm-term",
    },
    "quasilocality": {
        "chi": "counterexample",
        "TailFamily": "counterexample",
        "family_separation": "counterexample",
        "counterexample_f": "counterexample",
        "VariationResult": "counterexample",
        "kernel_function": "kernel-check",
        "default_probes": "counterexample",
        "variation_at": "counterexample",
        "splice_on": "counterexample",
        "DeltaResult": "quasilocality-scan",
        "directional_delta": "quasilocality-scan",
        "BadSetRecord": "quasilocality-scan",
        "sample_configurations": "quasilocality-scan",
        "delta_values": "quasilocality-scan",
        "bad_set_probability": "quasilocality-scan",
        "RateSeries": "quasilocality-scan",
        "continuity_rate": "quasilocality-scan",
        "prop1_bound": "prop1-bound",
    },
    "renormalization": {
        "single_site_kernel_prob": "decimate",
        "Transformation": "decimate",
        "pushforward": "decimate",
        "BlockSpinReport": "decimate",
        "block_spin_check": "decimate",
        "JointKernel": "decimate",
        "joint_kernel": "decimate",
        "joint_kernel_table": "decimate",
        "RenormalizedStrip": "quasilocality-scan",
        "ConditionalEstimate": "quasilocality-scan",
        "renormalized_conditional": "quasilocality-scan",
        "site_transfer_conditional": "quasilocality-scan",
    },
}


@dataclass
class ExperimentConfig:
    subcommand: str
    model: dict
    engine: dict
    scenario: dict
    output: dict

    def phi(self, beta: float | None = None) -> Interaction:
        m = self.model
        return Interaction(m["J"], m["h"], m["beta"] if beta is None else beta)

    def as_dict(self) -> dict:
        def plain(v):
            return list(v) if isinstance(v, tuple) else v

        return {
            "subcommand": self.subcommand,
            **{s: {k: plain(v) for k, v in getattr(self, s).items()}
               for s in ("model", "engine", "scenario", "output")},
        }


def _coerce(section: str, schema: dict, raw: dict) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, (conv, default) in schema.items():
        if key not in raw:
            out[key] = default
            continue
        try:
            out[key] = conv(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return out


def _read_sections(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed manifest: {exc}") from None
        data = data.get("config", data)
        return {k: v for k, v in data.items() if k != "subcommand"}
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(subcommand: str, path: Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a config before any compute."""
    if subcommand not in SCENARIOS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    raw = _read_sections(path) if path is not None else {}
    allowed = set(COMMON) | {"scenario"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {s: _coerce(s, COMMON[s], raw.get(s, {})) for s in COMMON}
    scenario = _coerce("scenario", SCENARIOS[subcommand], raw.get("scenario", {}))
    for k, v in (overrides or {}).items():
        if v is not None:
            parts["engine"][k] = v
    cfg = ExperimentConfig(subcommand, parts["model"], parts["engine"], scenario, parts["output"])
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    m, e, s = cfg.model, cfg.engine, cfg.scenario
    if m["d"] not in (1, 2):
        raise ConfigError("d must be 1 or 2")
    if m["beta"] < 0:
        raise ConfigError("beta must be nonnegative")
    if e["kind"] not in ("exact", "mc"):
        raise ConfigError("engine kind must be 'exact' or 'mc'")
    for k in ("chains", "sweeps", "samples", "horizon", "width"):
        if e[k] < 1:
            raise ConfigError(f"engine {k} must be positive")
    if e["burn_in"] < 0 or e["burn_in"] >= e["sweeps"]:
        raise ConfigError("need 0 <= burn_in < sweeps")
    bad_fmt = set(cfg.output["formats"]) - {"csv", "json"}
    if bad_fmt:
        raise ConfigError(f"unknown output format(s): {sorted(bad_fmt)}")
    if "transform" in s and s["transform"] != "none":
        _transform(cfg)
    for key in ("f",):
        if key in s:
            _function(s[key], m["d"], 1.0)
    for key in ("mu", "nu"):
        if key in s:
            _measure_kind(s[key])
    for key in ("omega", "theta", "boundary"):
        if key in s:
            _tail(s[key], m["d"])
    for key in ("Ms", "ns", "gaps"):
        if key in s and (len(s[key]) == 0 or min(s[key]) < 0):
            raise ConfigError(f"{key} must be a nonempty list of nonnegative integers")
    if "n_max" in s and s["n_max"] < s.get("n_min", 0):
        raise ConfigError("n_max must be at least n_min")
    sub = cfg.subcommand
    if sub == "quasilocality-scan":
        if max(s["Ms"]) >= s["M_ref"] or s["M_ref"] > e["horizon"]:
            raise ConfigError("need max(Ms) < M_ref <= horizon")
        if s["badset_engine"] not in ("exact", "sample"):
            raise ConfigError("badset_engine must be 'exact' or 'sample'")
        if s["epsilon"] > 0 and (max(s["Ms"]) >= s["badset_M_ref"] or min(s["Ms"]) < 1):
            raise ConfigError("bad-set scan needs 1 <= Ms < badset_M_ref")
    if sub == "cm-term":
        if m["d"] != 1:
            raise ConfigError("cm-term is available in d = 1")
        if s["target"] not in ("source", "image"):
            raise ConfigError("target must be 'source' or 'image'")
        if s["M_ref"] and s["M_ref"] <= max(s["Ms"]):
            raise ConfigError("M_ref must exceed every M")
    if sub == "prop1-bound" and not 0 < s["delta"] < s["c"]:
        raise ConfigError("need 0 < delta < c")
    if sub == "counterexample" and (m["d"] != 1 or max(s["ns"]) > 1000 or s["m_max"] < 1):
        raise ConfigError("counterexample needs d = 1, n <= 1000 and m_max >= 1")
    if sub in ("variational-check",) and m["d"] != 1:
        raise ConfigError("trial families are available in d = 1")
    if sub == "decoupling" and s["transform"] != "none" and m["d"] != 1:
        raise ConfigError("renormalized decoupling is available in d = 1")


# --- scenario vocabulary -------------------------------------------------------


def _transform(cfg: ExperimentConfig) -> Transformation:
    s, d = cfg.scenario, cfg.model["d"]
    kind, b, p = s["transform"], s["b"], s["p"]
    try:
        if kind == "decimation":
            return Transformation.decimation(b, d)
        if kind == "projection":
            return Transformation.projection(d)
        if kind == "kadanoff":
            return Transformation.kadanoff(p, b, d)
        if kind == "majority":
            return Transformation.majority(b, d)
        if kind == "noisy_projection":
            return Transformation.noisy_projection(p, b, d)
        if kind == "noisy_decimation":
            return Transformation.noisy_decimation(p, b, d)
    except ValueError as exc:
        raise ConfigError(f"transform: {exc}") from None
    raise ConfigError(f"unknown transform {kind!r}")


def _function(name: str, d: int, coefficient: float) -> LocalFunction:
    origin = (0,) * d
    if name == "zero":
        f = constant_function(0.0, d)
    elif name == "spin":
        f = spin(origin)
    elif name == "pair":
        f = spin_product([origin, (1,) + (0,) * (d - 1)])
    else:
        raise ConfigError(f"unknown function {name!r} (zero, spin, pair)")
    return LocalFunction(f.support, coefficient * np.asarray(f.table, dtype=float))


def _measure_kind(text: str) -> tuple:
    kind, _, arg = text.partition(":")
    if kind not in ("gibbs", "product"):
        raise ConfigError(f"unknown measure {text!r} (gibbs[:beta], product:p)")
    try:
        value = float(arg) if arg else None
    except ValueError:
        raise ConfigError(f"bad measure parameter in {text!r}") from None
    if kind == "product" and (value is None or not 0 < value < 1):
        raise ConfigError("product measures need 0 < p < 1")
    return kind, value


def _measure(cfg: ExperimentConfig, text: str):
    kind, value = _measure_kind(text)
    d = cfg.model["d"]
    if kind == "product":
        return ProductMeasure(value, d)
    phi = cfg.phi(value)
    if d == 1:
        return MarkovChain1D.gibbs(phi)
    box = cfg.scenario.get("box", 1)
    return BoxGibbs(phi, cube(box, 2), _tail(cfg.scenario.get("boundary", "plus"), 2))


def _tail(name: str, d: int):
    if name == "plus":
        return all_plus(d)
    if name == "minus":
        return all_minus(d)
    if name == "alternating":
        return alternating(d)
    if name.startswith("chi:") and d == 1:
        try:
            return chi(int(name[4:]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown configuration {name!r} (plus, minus, alternating, chi:<m>)")


# --- output --------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


@dataclass
class Table:
    name: str
    header: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def render(self, cfg: ExperimentConfig) -> str:
        meta = {"tool": "renormlab", "version": __version__, "subcommand": cfg.subcommand, **self.meta}
        lines = ["# " + "; ".join(f"{k}={_fmt(v)}" for k, v in meta.items()), ",".join(self.header)]
        lines += [",".join(_fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def write_outputs(cfg: ExperimentConfig, tables: list, out_dir: Path, extra: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    if "csv" in cfg.output["formats"]:
        for t in tables:
            text = t.render(cfg)
            path = out_dir / f"{t.name}.csv"
            path.write_text(text, encoding="utf-8")
            files[path.name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "config": cfg.as_dict(),
        "files": files,
        "engine": extra,
        "versions": {"renormlab": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    if "json" in cfg.output["formats"]:
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                               encoding="utf-8")
    return manifest


# --- subcommands ---------------------------------------------------------------


def run_kernel_check(cfg: ExperimentConfig, threads: int) -> tuple:
    d, s = cfg.model["d"], cfg.scenario
    spec = GibbsSpecification(cfg.phi(), d)
    sweep = axiom_sweep(spec, cube(s["radius"], d))
    window = cube(s["dlr_radius"], d)
    from .engines import enumerate_measure

    mu = enumerate_measure(cfg.phi(), window, all_plus(d))
    origin = Region.of([(0,) * d])
    dlr = dlr_residual(mu, spec, origin)
    mono = monotonicity_check(spec.table(cube(s["mono_radius"], d)))
    F = kernel_function(spec, origin, spin((0,) * d))
    sandwich = F(all_minus(d)) <= F(alternating(d)) <= F(all_plus(d))
    t = Table("kernel_check", ["check", "value", "passed"], meta={"pairs": sweep.pairs})
    t.rows = [
        ("properness", sweep.max_properness, sweep.max_properness == 0.0),
        ("consistency", sweep.max_consistency, sweep.max_consistency < 1e-10),
        ("dlr", dlr, dlr < 1e-10),
        ("monotonicity", mono.violation, mono.preserving),
        ("sandwich", F(all_plus(d)) - F(all_minus(d)), sandwich),
    ]
    if sweep.max_properness != 0.0 or sweep.max_consistency >= 1e-10 or dlr >= 1e-10:
        return [t], {}, "kernel axioms violated"
    return [t], {}, None


def run_decimate(cfg: ExperimentConfig, threads: int) -> tuple:
    from .engines import enumerate_measure
    from .lattice import configurations

    d = cfg.model["d"]
    T = _transform(cfg)
    image = cube(cfg.scenario["image_radius"], T.image_dim)
    pre = T.preimage(image)
    R = max(max(abs(c) for c in x) for x in pre.sites)
    window = cube(R, d)
    mu = enumerate_measure(cfg.phi(), window, _tail(cfg.scenario["boundary"], d))
    law = pushforward(mu, T, image)
    t = Table("pushforward", ["index", "configuration", "probability"],
              meta={"transform": repr(T), "image_sites": len(image)})
    for i, c in enumerate(configurations(len(image))):
        t.rows.append((i, "".join("+" if v > 0 else "-" for v in c), law.probabilities[i]))
    rep = block_spin_check(T)
    b = Table("block_spin", ["field", "value"])
    b.rows = [("strict_locality", rep.strict_locality), ("alpha_estimate", rep.alpha_estimate),
              ("locality_witness", repr(rep.locality_witness)), ("factorization", rep.factorization),
              ("factorization_residual", rep.factorization_residual)]
    origin = Region.of([(0,) * d])
    if T.image_sites(origin):
        jt = joint_kernel_table(GibbsSpecification(cfg.phi(), d), T, origin, T.image_sites(origin))
        jm = monotonicity_check(jt)
        b.rows += [("joint_monotone", jm.preserving), ("joint_violation", jm.violation)]
    total = float(law.probabilities.sum())
    if abs(total - 1.0) > 1e-12 or law.probabilities.min() < 0:
        return [t, b], {}, "pushforward is not a probability measure"
    return [t, b], {}, None


def run_pressure(cfg: ExperimentConfig, threads: int) -> tuple:
    s, d = cfg.scenario, cfg.model["d"]
    f = _function(s["f"], d, s["coefficient"])
    nu = _measure(cfg, s["nu"])
    series = pressure_estimate(f, nu, s["n_max"], d, s["n_min"], s["periodic"])
    meta = {"method": series.method, "n": " ".join(str(n) for n in series.n)}
    if isinstance(nu, MarkovChain1D) or (isinstance(nu, ProductMeasure) and d == 1):
        chain = nu if isinstance(nu, MarkovChain1D) else MarkovChain1D.product(nu.p_plus)
        try:
            meta["transfer_oracle"] = markov_pressure(f, chain)
        except (TypeError, ValueError):
            pass
    t = Table("pressure", ["pressure"], [(v,) for v in series.pressure], meta)
    if not np.all(np.isfinite(series.pressure)):
        return [t], {}, "pressure is not finite"
    return [t], {}, None


def run_entropy_density(cfg: ExperimentConfig, threads: int) -> tuple:
    s, d = cfg.scenario, cfg.model["d"]
    mu, nu = _measure(cfg, s["mu"]), _measure(cfg, s["nu"])
    series = entropy_density_series(mu, nu, s["n_max"], d, s["n_min"])
    chains = isinstance(mu, MarkovChain1D) and isinstance(nu, MarkovChain1D)
    rate = markov_entropy_rate(mu, nu) if chains else math.nan
    t = Table("entropy_density", ["n", "entropy", "per_site", "increment", "csiszar_gap", "oracle_entropy"],
              meta={"method": series.method, "oracle_rate": rate})
    worst = 0.0
    for i, n in enumerate(series.n):
        n = int(n)
        gap = csiszar_gap(mu, nu, cube(n - 1, d), cube(n, d)) if n >= 1 else math.nan
        if n >= 1:
            worst = min(worst, gap)
        oracle = markov_relative_entropy(mu, nu, 2 * n + 1) if chains else math.nan
        inc = series.increments[i] if i < len(series.increments) else math.nan
        t.rows.append((n, series.entropy[i], series.per_site[i], inc, gap, oracle))
    if worst < -1e-12:
        return [t], {}, f"negative Csiszar gap {worst!r}"
    if np.any(np.diff(series.entropy) < -1e-12):
        return [t], {}, "relative entropy decreased with volume"
    return [t], {}, None


def run_variational_check(cfg: ExperimentConfig, threads: int) -> tuple:
    s = cfg.scenario
    f = _function(s["f"], 1, s["coefficient"])
    nu = _measure(cfg, s["nu"])
    if not isinstance(nu, MarkovChain1D):
        nu = MarkovChain1D.product(nu.p_plus)
    res = legendre_gap(f, nu, s["family"])
    tilt = tilted_chain(f, nu)
    t = Table("variational", ["pressure", "best_trial_value", "gap", "certified", "converged",
                              "tilted_trial_value", "entropy_lower_bound", "tilted_entropy_rate"],
              meta={"family": res.family})
    t.rows.append((res.pressure, res.best_trial_value, res.gap, res.certified, res.converged,
                   trial_value(f, tilt, nu), entropy_lower_bound(tilt, nu, [f]), markov_entropy_rate(tilt, nu)))
    if res.gap < -s["tolerance"]:
        return [t], {}, f"Legendre gap {res.gap!r} below -{s['tolerance']}"
    return [t], {}, None


def run_decoupling(cfg: ExperimentConfig, threads: int) -> tuple:
    s, d = cfg.scenario, cfg.model["d"]
    extra = {}
    if s["transform"] == "none":
        nu = _measure(cfg, s["nu"])
    else:
        kind, value = _measure_kind(s["nu"])
        if kind != "gibbs":
            raise ConfigError("renormalized decoupling needs a Gibbs source")
        nu = RenormalizedStrip(cfg.phi(value), _transform(cfg), 1, cfg.engine["horizon"])
        extra = nu.manifest.extra
    prof = decoupling_profile(nu, s["n"], s["gaps"], s["family"], d)
    t = Table("decoupling", ["g", "c"], [(int(g), c) for g, c in zip(prof.gaps, prof.constants)],
              meta={"n": prof.n, "family": prof.family, "skipped": prof.skipped})
    if np.any(prof.constants < 0) or not np.all(np.isfinite(prof.constants)):
        return [t], extra, "decoupling constants must be finite and nonnegative"
    return [t], extra, None


def _expect(law) -> float:
    return float(law.probabilities[1] - law.probabilities[0])


def run_quasilocality_scan(cfg: ExperimentConfig, threads: int) -> tuple:
    s, e = cfg.scenario, cfg.engine
    T = _transform(cfg)
    phi = cfg.phi()
    strip = RenormalizedStrip(phi, T, e["width"], e["horizon"])
    dim = T.image_dim
    origin = Region.of([(0,) * dim])
    f = spin((0,) * dim)
    omega = _tail(s["omega"], dim)
    plus, minus = all_plus(dim), all_minus(dim)
    use_oracle = s["oracle"] and T.d == 1 and not (T.has_blocks and T.b > 1)
    header = ["M", "plus", "minus", "gap", "delta_plus", "delta_minus", "oracle_plus", "oracle_minus", "oracle_gap"]
    if e["kind"] == "mc":
        header += ["mc_plus", "mc_plus_se", "mc_minus", "mc_minus_se"]
    t = Table("scan", header, meta={"transform": repr(T), "width": e["width"], "horizon": e["horizon"],
                                    "omega": s["omega"], "M_ref": s["M_ref"], "engine": e["kind"]})
    worst_oracle = 0.0
    for M in s["Ms"]:
        vp = _expect(strip.filled_kernel(origin, omega, M, plus))
        vm = _expect(strip.filled_kernel(origin, omega, M, minus))
        dp = directional_delta(strip, origin, M, f, plus, omega, s["M_ref"]).value
        dm = directional_delta(strip, origin, M, f, minus, omega, s["M_ref"]).value
        if use_oracle:
            op = 2 * site_transfer_conditional(phi, T, omega, M, plus, e["horizon"]) - 1
            om = 2 * site_transfer_conditional(phi, T, omega, M, minus, e["horizon"]) - 1
            worst_oracle = max(worst_oracle, abs(op - vp), abs(om - vm))
        else:
            op = om = math.nan
        row = [M, vp, vm, abs(vp - vm), dp, dm, op, om, abs(op - om)]
        if e["kind"] == "mc":
            for fill in (plus, minus):
                est = renormalized_conditional(phi, T, origin, omega, M, fill, f, engine="mc", width=e["width"],
                                               horizon=e["horizon"], seed=e["seed"], chains=e["chains"],
                                               sweeps=e["sweeps"], burn_in=e["burn_in"], threads=threads)
                row += [est.mean, est.standard_error]
        t.rows.append(tuple(row))
    tables = [t]
    if s["epsilon"] > 0:
        if len(strip.step_sites) != 1:
            raise ConfigError("bad-set scans need a one-dimensional image")
        Ms = [M for M in s["Ms"]]
        rec = bad_set_probability(strip, strip, plus, origin, f, s["epsilon"], Ms, s["badset_M_ref"],
                                  engine=s["badset_engine"], samples=e["samples"], seed=e["seed"], d=dim,
                                  theta_name="plus")
        alpha = T.default_alpha() * np.asarray(Ms, dtype=float)
        rate = continuity_rate(rec, alpha)
        b = Table("badset", ["M", "probability", "standard_error", "alpha", "rate_entry"],
                  meta={"epsilon": s["epsilon"], "engine": rec.method, "limsup_estimate": rate.limsup_estimate})
        b.rows = [(int(M), p, se, a, r) for M, p, se, a, r in
                  zip(rec.M, rec.probability, rec.error, rate.alpha, rate.entries)]
        tables.append(b)
    if worst_oracle > 1e-9:
        return tables, strip.manifest.extra, f"strip engine disagrees with the transfer oracle by {worst_oracle!r}"
    return tables, strip.manifest.extra, None


def run_cm_term(cfg: ExperimentConfig, threads: int) -> tuple:
    s, e = cfg.scenario, cfg.engine
    phi = cfg.phi()
    if s["target"] == "source":
        gamma = GibbsSpecification(phi, 1)
        nu = MarkovChain1D.gibbs(phi)
        mu = MarkovChain1D.gibbs(cfg.phi(s["mu_beta"]))
    else:
        T = _transform(cfg)
        gamma = nu = RenormalizedStrip(phi, T, 1, e["horizon"])
        mu = RenormalizedStrip(cfg.phi(s["mu_beta"]), T, 1, e["horizon"])
    theta = _tail(s["theta"], 1)
    origin = Region.of([(0,)])
    f = spin((0,))
    t = Table("cm_term", ["M", "C", "B", "A", "lhs", "identity_residual"],
              meta={"target": s["target"], "M_ref": s["M_ref"], "theta": s["theta"]})
    worst = 0.0
    for M in s["Ms"]:
        r = cm_term(mu, nu, gamma, origin, M, theta, f, s["M_ref"] or None, 1)
        if r.A is None:
            t.rows.append((M, r.C, r.B, math.nan, math.nan, math.nan))
        else:
            res = r.A + r.B + r.C - r.lhs
            worst = max(worst, abs(res))
            t.rows.append((M, r.C, r.B, r.A, r.lhs, res))
    if worst > 1e-10:
        return [t], {}, f"A + B + C differs from the left side by {worst!r}"
    return [t], {}, None


def run_prop1_bound(cfg: ExperimentConfig, threads: int) -> tuple:
    s, d = cfg.scenario, cfg.model["d"]
    mu, nu = _measure(cfg, s["mu"]), _measure(cfg, s["nu"])
    Ms = np.asarray(s["Ms"])
    series = entropy_density_series(mu, nu, int(Ms.max()), d, 0)
    H = series.entropy[Ms]
    alpha = s["alpha_scale"] * np.maximum(Ms, 1)
    bound = prop1_bound(H, alpha, s["c"], s["delta"])
    t = Table("prop1_bound", ["M", "alpha", "H", "bound"], meta={"c": s["c"], "delta": s["delta"]})
    t.rows = [(int(M), a, h, bd) for M, a, h, bd in zip(Ms, alpha, H, bound)]
    return [t], {}, None


def run_counterexample(cfg: ExperimentConfig, threads: int) -> tuple:
    s = cfg.scenario
    fam = TailFamily(m_max=s["m_max"])
    probes = default_probes(1, fam, s["probe_count"])
    omega = fam.base
    F = lambda eta: counterexample_f(eta, fam)  # noqa: E731
    t = Table("counterexample", ["n", "variation", "formula", "exact", "dir_plus", "dir_minus",
                                 "dir_alternating", "f_member", "separation"],
              meta={"m_max": s["m_max"], "probes": len(probes)})
    worst = 0.0
    for n in s["ns"]:
        v = variation_at(F, omega, n, probes)
        formula = s["m_max"] / (n + s["m_max"])
        worst = max(worst, abs(v.value - formula))
        dirs = [directional_delta(F, cube(0, 1), n, None, th, omega).value
                for th in (all_plus(1), all_minus(1), alternating(1))]
        sep = family_separation(1, 2, n)
        t.rows.append((n, v.value, formula, v.exact, *dirs, F(fam.member(n, s["m_max"])), sep))
    if worst > 1e-12:
        return [t], {}, f"variation differs from m_max/(n+m_max) by {worst!r}"
    return [t], {}, None


RUNNERS = {
    "kernel-check": run_kernel_check,
    "decimate": run_decimate,
    "pressure": run_pressure,
    "entropy-density": run_entropy_density,
    "variational-check": run_variational_check,
    "decoupling": run_decoupling,
    "quasilocality-scan": run_quasilocality_scan,
    "cm-term": run_cm_term,
    "prop1-bound": run_prop1_bound,
    "counterexample": run_counterexample,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> int:
    """Run one experiment and write its outputs; returns the exit status."""
    try:
        tables, extra, violation = RUNNERS[cfg.subcommand](cfg, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, NotImplementedError, ValueError, ArithmeticError, MemoryError) as exc:
        print(f"engine failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    write_outputs(cfg, tables, out_dir, extra)
    if violation:
        print(f"contract violation: {violation}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="renormlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI config or a previous manifest.json")
        p.add_argument("--out", type=Path, help="output directory (overrides [output] directory)")
        p.add_argument("--seed", type=str, help="unsigned 64-bit seed (overrides [engine] seed)")
        p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    return ap


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = _seed(args.seed) if args.seed is not None else None
        cfg = load_config(args.subcommand, args.config, {"seed": seed})
        threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
        if threads < 1:
            raise ConfigError("threads must be positive")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out if args.out is not None else Path(cfg.output["directory"])
    return run_experiment(cfg, out_dir, threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
