import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renormlab.engines import MarkovChain1D, enumerate_measure
from renormlab.lattice import (
    Interaction,
    Region,
    all_minus,
    all_plus,
    alternating,
    configurations,
    cube,
    from_values,
    spin,
    spin_product,
)
from renormlab.renormalization import (
    RenormalizedStrip,
    Transformation,
    block_spin_check,
    joint_kernel,
    joint_kernel_table,
    pushforward,
    renormalized_conditional,
    single_site_kernel_prob,
    site_transfer_conditional,
)
from renormlab.specification import FiniteMeasure, GibbsSpecification, domination_violation, monotonicity_check

ORIGIN = Region.of([0])


# --- single-site factors -------------------------------------------------------------


@pytest.mark.parametrize("s", [-3, -1, 1, 3])
def test_kadanoff_zero_noise_is_uniform(s):
    assert single_site_kernel_prob("kadanoff", 0.0, s, 1) == 0.5


def test_kadanoff_example():
    v = single_site_kernel_prob("kadanoff", 1.0, 3, 1)
    assert v == pytest.approx(math.exp(3) / (math.exp(3) + math.exp(-3)), abs=1e-15)
    assert v == pytest.approx(0.997527, abs=1e-6)


@pytest.mark.parametrize("s", [-3, -1, 0, 1, 3])
def test_large_noise_parameter_approaches_majority(s):
    for w in (-1, 1):
        big = single_site_kernel_prob("kadanoff", 60.0, s, w)
        assert big == pytest.approx(single_site_kernel_prob("majority", None, s, w), abs=1e-12)


def test_unattainable_block_sum_rejected():
    with pytest.raises(ValueError):
        single_site_kernel_prob("kadanoff", 1.0, 2, 1, block_size=3)
    with pytest.raises(ValueError):
        single_site_kernel_prob("bogus", 1.0, 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5), st.integers(0, 4), st.sampled_from([-1, 1]))
def test_kadanoff_monotone_and_symmetric(p, k, w):
    size = 4
    sums = np.arange(-size, size + 1, 2)
    vals = single_site_kernel_prob("kadanoff", p, sums, 1, size)
    assert np.all(np.diff(vals) > 0)
    s = sums[k]
    assert single_site_kernel_prob("kadanoff", p, s, w) == pytest.approx(single_site_kernel_prob("kadanoff", p, -s, -w))
    assert single_site_kernel_prob("kadanoff", p, s, 1) + single_site_kernel_prob("kadanoff", p, s, -1) == pytest.approx(1)


def test_deterministic_kinds_carry_no_noise():
    assert Transformation.decimation(2).deterministic
    assert not Transformation.kadanoff(0.5, 2).deterministic
    with pytest.raises(ValueError):
        Transformation.kadanoff(None, 2)


# --- pushforward ---------------------------------------------------------------------------


def test_decimation_of_product_is_product():
    src = cube(3)
    mu = FiniteMeasure.product(src, 0.3)
    img = pushforward(mu, Transformation.decimation(2))
    assert img.support.sites == cube(1).sites
    assert np.allclose(img.probabilities, FiniteMeasure.product(cube(1), 0.3).probabilities, atol=1e-15)


def test_zero_noise_kadanoff_image_is_uniform():
    mu = enumerate_measure(Interaction(1, 0.4, 1.0), cube(3), all_plus())
    img = pushforward(mu, Transformation.kadanoff(0.0, 1))
    assert np.allclose(img.probabilities, 1 / 2**7, atol=1e-15)


@pytest.mark.parametrize("beta", [0.3, 1.0])
def test_decimated_chain_correlation_matches_transfer(beta):
    chain = MarkovChain1D.gibbs(Interaction(1, 0, beta))
    img = pushforward(chain.marginal(cube(2)), Transformation.decimation(2))
    corr = img.expect(spin_product([(0,), (1,)]))
    assert corr == pytest.approx(math.tanh(beta) ** 2, abs=1e-10)


def test_pushforward_rejects_escaping_block():
    with pytest.raises(ValueError):
        pushforward(FiniteMeasure.uniform(cube(1)), Transformation.decimation(2), Region.of([1]))


@pytest.mark.parametrize("T", [Transformation.decimation(2), Transformation.kadanoff(0.7, 1),
                               Transformation.majority(3), Transformation.noisy_decimation(0.5, 2)])
def test_pushforward_preserves_mass_and_domination(T):
    phi = Interaction(1, 0.0, 0.8)
    W = cube(3)
    lo = enumerate_measure(phi, W, all_minus())
    hi = enumerate_measure(phi, W, all_plus())
    img_lo, img_hi = pushforward(lo, T), pushforward(hi, T)
    assert img_hi.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    k = len(img_lo.support)
    assert domination_violation(img_lo.probabilities, img_hi.probabilities, k)[0] <= 1e-12


# --- block-spin checks -------------------------------------------------------------------------


@pytest.mark.parametrize("b", [2, 3])
def test_decimation_is_block_spin(b):
    rep = block_spin_check(Transformation.decimation(b))
    assert rep.strict_locality and rep.factorization
    assert rep.alpha_estimate <= b
    assert rep.factorization_residual == 0.0


def test_layer_projection_is_not_strictly_local():
    rep = block_spin_check(Transformation.projection(2))
    assert not rep.strict_locality
    assert rep.locality_witness[0] == "uncovered"


@pytest.mark.parametrize("T", [Transformation.kadanoff(0.6, 2), Transformation.majority(3),
                               Transformation.noisy_projection(0.4, 1), Transformation.kadanoff(0.5, 2, d=2)])
def test_product_kinds_factorize(T):
    rep = block_spin_check(T)
    assert rep.factorization and rep.factorization_residual < 1e-15
    assert rep.strict_locality


# --- joint kernel --------------------------------------------------------------------------------


def test_joint_kernel_identity_copy():
    phi = Interaction(1, 0.2, 0.9)
    gamma = GibbsSpecification(phi)
    T = Transformation.decimation(1)
    vol = cube(1)
    jk = joint_kernel(gamma, T, vol, vol, alternating(), all_plus())
    row = gamma.kernel(vol, alternating()).probabilities
    P = jk.measure.probabilities.reshape(8, 8)
    assert np.allclose(P, np.diag(row), atol=1e-15)
    assert np.allclose(jk.source_marginal().probabilities, row)
    assert np.allclose(jk.image_marginal().probabilities, row)


def test_joint_kernel_without_coupled_image_sites():
    gamma = GibbsSpecification(Interaction(1, 0.1, 0.7))
    vol = Region.of([1])  # odd site: no decimation block meets it
    jk = joint_kernel(gamma, Transformation.decimation(2), vol, Region(()), all_plus(), all_plus())
    assert np.allclose(jk.measure.probabilities, gamma.kernel(vol, all_plus()).probabilities, atol=1e-15)


def test_joint_kernel_rows_valid_and_monotone_for_noisy_decimation():
    gamma = GibbsSpecification(Interaction(1, 0.0, 1.0))
    T = Transformation.noisy_decimation(0.6, 2)
    table = joint_kernel_table(gamma, T, Region.of([0, 1]), Region.of([0]))
    assert np.all(table.rows >= 0)
    assert np.allclose(table.rows.sum(axis=1), 1.0, atol=1e-12)
    assert monotonicity_check(table).preserving


def test_joint_kernel_row_matches_direct_construction():
    gamma = GibbsSpecification(Interaction(1, 0.3, 0.8))
    T = Transformation.kadanoff(0.7, 1)
    vol, img = Region.of([0, 1]), Region.of([0])
    table = joint_kernel_table(gamma, T, vol, img)
    omega = from_values(Region.of([-1, 2]), [1, -1])
    omega_img = from_values(Region.of([1]), [-1])
    jk = joint_kernel(gamma, T, vol, img, omega, omega_img)
    dep_vals = [omega.at(x[1:]) if x[0] == 0 else omega_img.at(x[1:]) for x in table.dependence.sites]
    i = int(sum((v > 0) << (len(dep_vals) - 1 - j) for j, v in enumerate(dep_vals)))
    assert np.allclose(table.rows[i], jk.measure.probabilities, atol=1e-15)


# --- strips and renormalized conditionals -----------------------------------------------------------


@pytest.mark.parametrize("T,steps", [(Transformation.decimation(2), 3), (Transformation.kadanoff(0.8, 1), 4),
                                     (Transformation.majority(2), 3), (Transformation.noisy_decimation(0.4, 3), 2)])
def test_strip_image_law_matches_pushforward(T, steps):
    phi = Interaction(1, 0.2, 0.9)
    chain = MarkovChain1D.gibbs(phi)
    src = Region.of(range(0, T.b * steps))
    img = Region.of(range(steps))
    direct = pushforward(chain.marginal(src), T, img)
    strip = RenormalizedStrip(phi, T)
    assert np.allclose(strip.image_marginal(steps).probabilities, direct.probabilities, atol=1e-13)


def test_strip_samples_follow_image_law():
    strip = RenormalizedStrip(Interaction(1, 0, 0.8), Transformation.kadanoff(0.9, 1))
    samples = strip.sample(Region.of([0, 1, 2]), 4000, seed=3)
    law = strip.marginal(Region.of([0, 1, 2])).probabilities
    idx = ((samples > 0).astype(int) * np.array([4, 2, 1])).sum(axis=1)
    freq = np.bincount(idx, minlength=8) / len(idx)
    se = np.sqrt(law * (1 - law) / len(idx))
    assert np.all(np.abs(freq - law) < 5 * se + 1e-12)


@pytest.mark.parametrize("T", [Transformation.decimation(2), Transformation.decimation(3),
                               Transformation.kadanoff(0.7, 1), Transformation.noisy_decimation(0.5, 2)])
@pytest.mark.parametrize("theta", [all_plus(), all_minus(), alternating()])
def test_strip_matches_site_transfer_oracle(T, theta):
    phi = Interaction(1, 0.1, 1.0)
    strip = RenormalizedStrip(phi, T, horizon=48)
    for M in (0, 1, 4):
        a = strip.filled_kernel(ORIGIN, alternating(), M, theta).probabilities[1]
        b = site_transfer_conditional(phi, T, alternating(), M, theta, horizon=48)
        assert a == pytest.approx(b, abs=1e-12)


def test_site_transfer_oracle_rejects_blocks():
    with pytest.raises(ValueError):
        site_transfer_conditional(Interaction(), Transformation.majority(2), all_plus(), 1, all_plus())


def test_beta_zero_conditional_is_unconditional():
    T = Transformation.kadanoff(0.9, 1)
    for fill in (all_plus(), all_minus()):
        est = renormalized_conditional(Interaction(1, 0, 0.0), T, ORIGIN, alternating(), 2, fill, spin((0,)))
        assert est.mean == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("beta", [0.5, 1.0])
def test_decimated_conditional_mc_matches_exact(beta):
    phi = Interaction(1, 0.0, beta)
    T = Transformation.decimation(2)
    f = spin((0,))
    ex = renormalized_conditional(phi, T, ORIGIN, alternating(), 2, all_plus(), f)
    mc = renormalized_conditional(phi, T, ORIGIN, alternating(), 2, all_plus(), f, engine="mc",
                                  seed=17, chains=4, sweeps=2500, burn_in=250)
    assert mc.standard_error > 0
    assert abs(mc.mean - ex.mean) < 3 * mc.standard_error


def test_noisy_conditional_mc_matches_exact():
    phi = Interaction(1, 0.0, 0.6)
    T = Transformation.kadanoff(0.8, 1)
    f = spin((0,))
    ex = renormalized_conditional(phi, T, ORIGIN, all_plus(), 3, all_plus(), f)
    mc = renormalized_conditional(phi, T, ORIGIN, all_plus(), 3, all_plus(), f, engine="mc", pad=4,
                                  seed=5, chains=4, sweeps=3000, burn_in=300)
    assert abs(mc.mean - ex.mean) < 3 * mc.standard_error + 1e-3


def test_plus_fill_dominates_minus_fill():
    phi = Interaction(1, 0.0, 1.2)
    for T in (Transformation.kadanoff(0.6, 1), Transformation.noisy_decimation(0.5, 2)):
        strip = RenormalizedStrip(phi, T, horizon=64)
        for M in range(0, 6):
            up = strip.filled_kernel(ORIGIN, alternating(), M, all_plus()).probabilities[1]
            down = strip.filled_kernel(ORIGIN, alternating(), M, all_minus()).probabilities[1]
            assert down <= up + 1e-14


def test_two_dimensional_high_temperature_gap_small():
    strip = RenormalizedStrip(Interaction(1, 0, 0.2), Transformation.decimation(2, d=2), width=4, horizon=64)
    origin = Region.of([(0, 0)])
    up = strip.filled_kernel(origin, alternating(2), 3, all_plus(2)).expect(spin((0, 0)))
    down = strip.filled_kernel(origin, alternating(2), 3, all_minus(2)).expect(spin((0, 0)))
    assert abs(up - down) < 0.01


def test_strip_filled_kernel_validation():
    strip = RenormalizedStrip(Interaction(), Transformation.decimation(2), horizon=8)
    with pytest.raises(ValueError):
        strip.filled_kernel(ORIGIN, all_plus(), 9, all_plus())
    with pytest.raises(ValueError):
        strip.filled_kernel(Region.of([1]), all_plus(), 2, all_plus())
    with pytest.raises(ValueError):
        RenormalizedStrip(Interaction(), Transformation.decimation(2), width=3)
    with pytest.raises(ValueError):
        renormalized_conditional(Interaction(), Transformation.decimation(2), ORIGIN, all_plus(), 1, all_plus(),
                                 spin((1,)))
