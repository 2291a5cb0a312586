import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renormlab.engines import (
    MAX_FREE_SITES,
    ColumnChain,
    EngineError,
    MarkovChain1D,
    RunManifest,
    batch_means,
    coupled_pair,
    empirical_estimate,
    enumerate_measure,
    integrated_autocorrelation,
    mc_sample,
    transfer_matrix_1d,
    uniforms,
)
from renormlab.lattice import (
    Interaction,
    LocalFunction,
    Region,
    all_minus,
    all_plus,
    configurations,
    constant_function,
    cube,
    spin,
    spin_product,
)
from renormlab.specification import gibbs_kernel


def ring_log_partition(phi, n):
    """Brute-force log Z / n of an n-site periodic chain."""
    logs = []
    for c in itertools.product([-1, 1], repeat=n):
        e = sum(phi.J * c[i] * c[(i + 1) % n] + phi.h * c[i] for i in range(n))
        logs.append(phi.beta * e)
    logs = np.array(logs)
    m = logs.max()
    return (m + math.log(np.exp(logs - m).sum())) / n


# --- exact enumeration -----------------------------------------------------------


def test_enumeration_beta_zero_uniform():
    mu = enumerate_measure(Interaction(1, 0.3, 0.0), cube(2), all_plus())
    assert np.allclose(mu.probabilities, 1 / 32, atol=1e-15)


def test_enumeration_fully_constrained_is_point_mass():
    W = cube(1)
    mu = enumerate_measure(Interaction(1, 0, 1), W, all_plus(), {(-1,): 1, (0,): -1, (1,): 1})
    assert mu.probabilities[0b101] == 1.0
    assert mu.probabilities.sum() == 1.0


def test_enumeration_cap():
    with pytest.raises(EngineError):
        enumerate_measure(Interaction(), Region.of(range(MAX_FREE_SITES + 1)), all_plus())


def test_enumeration_two_sites_with_boundary_matches_kernel():
    phi = Interaction(1, 0.2, 0.8)
    W = Region.of([0, 1])
    mu = enumerate_measure(phi, W, all_minus())
    assert np.allclose(mu.probabilities, gibbs_kernel(phi, W, all_minus()).probabilities, atol=1e-15)


# --- transfer matrices -------------------------------------------------------------


def test_transfer_periodic_limit():
    phi = Interaction(1, 0, 1)
    r = transfer_matrix_1d(phi, 4000, "periodic")
    assert r.log_partition_per_site == pytest.approx(math.log(math.e + 1 / math.e), abs=1e-12)
    assert r.log_partition_per_site == pytest.approx(1.126928, abs=1e-6)


@pytest.mark.parametrize("n", [3, 7, 12])
@pytest.mark.parametrize("beta,h", [(1.0, 0.0), (0.6, 0.4)])
def test_transfer_periodic_matches_brute_force(n, beta, h):
    phi = Interaction(1, h, beta)
    assert transfer_matrix_1d(phi, n).log_partition_per_site == pytest.approx(ring_log_partition(phi, n), abs=1e-12)


@pytest.mark.parametrize("boundary", ["periodic", "free", "plus", "minus"])
def test_transfer_independent_sites(boundary):
    beta, h = 0.7, 0.9
    r = transfer_matrix_1d(Interaction(0.0, h, beta), 6, boundary)
    assert np.allclose(2 * r.marginals - 1, math.tanh(beta * h), atol=1e-12)


def test_transfer_beta_zero():
    assert transfer_matrix_1d(Interaction(1, 1, 0), 9).log_partition_per_site == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("boundary,tail", [("plus", all_plus()), ("minus", all_minus())])
@pytest.mark.parametrize("n", [1, 5, 12])
def test_transfer_agrees_with_enumeration(boundary, tail, n):
    phi = Interaction(1, 0.15, 0.9)
    W = Region.of(range(n))
    mu = enumerate_measure(phi, W, tail)
    r = transfer_matrix_1d(phi, n, boundary)
    for i in range(n):
        assert mu.marginal(Region.of([i])).probabilities[1] == pytest.approx(r.marginals[i], abs=1e-10)
    for i in range(n - 1):
        assert mu.expect(spin_product([(i,), (i + 1,)])) == pytest.approx(r.pair_correlations[i], abs=1e-10)


def test_transfer_rejects_unknown_boundary():
    with pytest.raises(ValueError):
        transfer_matrix_1d(Interaction(), 3, "twisted")


# --- chains -----------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.5), st.floats(-0.8, 0.8))
def test_gibbs_chain_matches_long_periodic_ring(beta, h):
    phi = Interaction(1, h, beta)
    chain = MarkovChain1D.gibbs(phi)
    r = transfer_matrix_1d(phi, 2000)
    assert chain.stationary[1] == pytest.approx(r.marginals[0], abs=1e-9)
    pair = chain.pair_law()
    assert pair.sum() == pytest.approx(1.0)
    s = np.array([-1.0, 1.0])
    assert float((pair * np.outer(s, s)).sum()) == pytest.approx(r.pair_correlations[0], abs=1e-9)


def test_chain_marginal_with_gaps():
    chain = MarkovChain1D.gibbs(Interaction(1, 0.2, 0.8))
    full = chain.marginal(cube(2))
    gapped = chain.marginal(Region.of([-2, 0, 2]))
    assert np.allclose(full.marginal(Region.of([-2, 0, 2])).probabilities, gapped.probabilities, atol=1e-14)


def test_product_chain_is_independent():
    chain = MarkovChain1D.product(0.3)
    assert np.allclose(chain.marginal(cube(1)).probabilities,
                       np.prod(np.where(configurations(3) > 0, 0.3, 0.7), axis=1))


def test_column_chain_width_one_is_gibbs_chain():
    phi = Interaction(1, 0.3, 0.7)
    cc = ColumnChain(phi, 1)
    ch = MarkovChain1D.gibbs(phi)
    assert np.allclose(cc.transition, ch.transition, atol=1e-14)
    assert np.allclose(cc.stationary, ch.stationary, atol=1e-14)


def test_column_chain_blocks_are_consistent():
    cc = ColumnChain(Interaction(1, 0.1, 0.5), 2, block=2)
    assert np.allclose(cc.transition.sum(axis=1), 1.0)
    assert np.allclose(cc.stationary @ cc.transition, cc.stationary, atol=1e-14)
    first = np.bincount(cc.block_columns[:, 0], weights=cc.stationary)
    assert np.allclose(first, cc.column_stationary, atol=1e-14)
    assert cc.block_spins().shape == (16, 2, 2)


@pytest.mark.parametrize("width,beta,h", [(2, 0.4, 0.0), (2, 0.7, 0.3), (3, 0.5, 0.2)])
def test_column_chain_matches_periodic_ladder(width, beta, h):
    # brute force: L columns, periodic along the strip; column law -> stationary law as L grows
    phi = Interaction(1, h, beta)
    L = 18 // width
    cc = ColumnChain(phi, width)
    s = configurations(L * width).reshape(-1, L, width).astype(float)
    e = h * s.sum(axis=(1, 2)) + (s * np.roll(s, -1, axis=1)).sum(axis=(1, 2))
    rows = [(r, r + 1) for r in range(width - 1)] + ([(width - 1, 0)] if cc.periodic_transverse else [])
    for a, c in rows:
        e = e + (s[:, :, a] * s[:, :, c]).sum(axis=1)
    w = np.exp(beta * (e - e.max()))
    idx = (s[:, 0, :] > 0).astype(int) @ (1 << np.arange(width - 1, -1, -1))
    law = np.bincount(idx, weights=w, minlength=2**width) / w.sum()
    lam = np.sort(np.abs(np.linalg.eigvals(cc.column_transition)))[::-1]
    assert np.allclose(law, cc.column_stationary, atol=4 * lam[1] ** L + 1e-12)


# --- Monte Carlo --------------------------------------------------------------------------


def test_uniforms_deterministic():
    a = uniforms(7, 2, 5, 10)
    assert np.array_equal(a, uniforms(7, 2, 5, 10))
    assert not np.array_equal(a, uniforms(7, 2, 6, 10))
    assert not np.array_equal(a, uniforms(7, 3, 5, 10))
    assert np.all((a >= 0) & (a < 1))


def test_uniforms_of_consecutive_sweeps_do_not_overlap():
    # drawing n values advances the counter; streams of nearby sweeps must stay disjoint
    draws = [set(uniforms(1, 0, t, 64).tolist()) for t in range(6)]
    for i in range(6):
        for j in range(i + 1, 6):
            assert not draws[i] & draws[j]


def test_mc_beta_zero_magnetization():
    W = cube(4)
    stream = mc_sample(Interaction(1, 0, 0.0), W, all_plus(), seed=11, chains=4, sweeps=800, burn_in=0)
    m = LocalFunction.from_callable(W, lambda c: c.mean())
    est = empirical_estimate(stream, m)
    assert abs(est.mean) < 3 * est.standard_error


def test_mc_neighbour_correlation_matches_transfer():
    phi = Interaction(1, 0, 1.0)
    n = 16
    W = Region.of(range(n))
    stream = mc_sample(phi, W, all_plus(), seed=3, chains=4, sweeps=3000, burn_in=300)
    r = transfer_matrix_1d(phi, n, "plus")
    est = empirical_estimate(stream, spin_product([(7,), (8,)]))
    assert abs(est.mean - r.pair_correlations[7]) < 3 * est.standard_error


def test_mc_single_free_site_matches_kernel():
    phi = Interaction(1, 0.3, 0.8)
    W = cube(2)
    cons = {(-2,): 1, (-1,): -1, (1,): 1, (2,): 1}
    stream = mc_sample(phi, W, all_plus(), cons, seed=5, chains=4, sweeps=4000, burn_in=10)
    assert np.all(stream.samples[:, :, [0, 1, 3, 4]] == np.array([1, -1, 1, 1]))
    from renormlab.lattice import from_values

    p = gibbs_kernel(phi, Region.of([0]), from_values(W, [1, -1, 1, 1, 1])).probabilities[1]
    est = empirical_estimate(stream, spin((0,)))
    assert abs(est.mean - (2 * p - 1)) < 3 * est.standard_error


def test_mc_matches_enumeration_at_twelve_sites():
    phi = Interaction(1, 0.1, 0.6)
    W = Region.of([(x, y) for x in range(4) for y in range(3)])
    f = spin_product([(1, 1), (2, 1)])
    exact = enumerate_measure(phi, W, all_minus(2)).expect(f)
    est = empirical_estimate(mc_sample(phi, W, all_minus(2), seed=9, chains=4, sweeps=2500, burn_in=250), f)
    assert abs(est.mean - exact) < 3 * est.standard_error


def test_empirical_constant_has_zero_error():
    stream = mc_sample(Interaction(), cube(1), all_plus(), seed=1, chains=2, sweeps=50, burn_in=5)
    est = empirical_estimate(stream, constant_function(2.5))
    assert est.mean == 2.5 and est.standard_error == 0.0


def test_empirical_rejects_support_escape():
    stream = mc_sample(Interaction(), cube(1), all_plus(), seed=1, chains=1, sweeps=20, burn_in=2)
    with pytest.raises(ValueError):
        empirical_estimate(stream, spin((5,)))


def test_mc_rejects_bad_schedule():
    with pytest.raises(ValueError):
        mc_sample(Interaction(), cube(1), all_plus(), sweeps=10, burn_in=10)


def test_mc_deterministic_across_runs_and_threads():
    phi = Interaction(1, 0.2, 0.7)
    W = cube(1, 2)
    a = mc_sample(phi, W, all_plus(2), seed=2**63 + 5, chains=4, sweeps=120, burn_in=20, threads=1)
    b = mc_sample(phi, W, all_plus(2), seed=2**63 + 5, chains=4, sweeps=120, burn_in=20, threads=1)
    c = mc_sample(phi, W, all_plus(2), seed=2**63 + 5, chains=4, sweeps=120, burn_in=20, threads=4)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.samples, c.samples)
    assert a.manifest == c.manifest


def test_fkg_domination_of_boundary_means():
    phi = Interaction(1, 0, 0.9)
    W = cube(1, 2)
    m = LocalFunction.from_callable(W, lambda c: c.mean())
    up = empirical_estimate(mc_sample(phi, W, all_plus(2), seed=4, chains=4, sweeps=1500, burn_in=150), m)
    down = empirical_estimate(mc_sample(phi, W, all_minus(2), seed=4, chains=4, sweeps=1500, burn_in=150), m)
    assert up.mean - down.mean > 3 * math.hypot(up.standard_error, down.standard_error)


@pytest.mark.parametrize("d,beta", [(1, 1.0), (2, 0.5), (2, 1.2)])
def test_coupled_chains_dominate_pathwise(d, beta):
    plus, minus = coupled_pair(Interaction(1, 0, beta), cube(2, d), seed=13, sweeps=150)
    assert plus.shape == minus.shape
    assert np.all(plus >= minus)


# --- estimates and manifests ---------------------------------------------------------------


def test_batch_means_error_bar():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(4, 4000))
    est = batch_means(vals, 20)
    assert est.standard_error == pytest.approx(1 / math.sqrt(16000), rel=0.4)


def test_integrated_autocorrelation():
    rng = np.random.default_rng(1)
    assert integrated_autocorrelation(rng.normal(size=(2, 20000))) == pytest.approx(1.0, abs=0.1)
    rho = 0.8
    x = np.zeros(50000)
    e = rng.normal(size=50000)
    for t in range(1, len(x)):
        x[t] = rho * x[t - 1] + e[t]
    assert integrated_autocorrelation(x, 200) == pytest.approx((1 + rho) / (1 - rho), rel=0.15)
    assert integrated_autocorrelation(np.ones(10)) == 1.0


def test_manifest_roundtrip():
    stream = mc_sample(Interaction(1, 0, 0.5), cube(1), all_plus(), seed=8, chains=2, sweeps=40, burn_in=4)
    data = json.loads(stream.manifest.to_json())
    assert data["seed"] == 8 and data["chains"] == 2 and data["sweeps"] == 40
    assert "Philox" in data["extra"]["rng"]
    assert "magnetization_autocorrelation" in data["extra"]
    m2 = RunManifest(**{**data, "wall_clock": 123.0})
    assert m2 == stream.manifest
