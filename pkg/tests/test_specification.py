import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renormlab.engines import enumerate_measure, transfer_matrix_1d
from renormlab.lattice import (
    Interaction,
    LocalFunction,
    Region,
    all_minus,
    all_plus,
    alternating,
    configurations,
    cube,
    from_values,
    indicator,
    outer_boundary,
    spin,
)
from renormlab.renormalization import RenormalizedStrip, Transformation
from renormlab.specification import (
    FiniteMeasure,
    GibbsSpecification,
    KernelTable,
    _max_closure,
    apply_kernel,
    axiom_sweep,
    boundary_configuration,
    consistency_check,
    consistency_residuals,
    directional_limit_kernel,
    dlr_residual,
    domination_violation,
    gibbs_kernel,
    increasing_catalogue,
    monotonicity_check,
    properness_check,
    total_variation,
    upsets,
)

ORIGIN = Region.of([0])


def test_single_site_kernel_oracle():
    law = gibbs_kernel(Interaction(1, 0, 1), ORIGIN, all_plus())
    assert law.probabilities[1] == pytest.approx(math.exp(2) / (math.exp(2) + math.exp(-2)), abs=1e-12)
    assert law.probabilities[1] == pytest.approx(0.982014, abs=1e-6)


@pytest.mark.parametrize("d,n", [(1, 0), (1, 2), (2, 0), (2, 1)])
def test_beta_zero_is_uniform(d, n):
    law = gibbs_kernel(Interaction(1, 0.5, 0.0), cube(n, d), alternating(d))
    assert np.allclose(law.probabilities, 1 / 2 ** len(cube(n, d)), atol=1e-15)


def test_two_site_free_oracle():
    # P(++) with free ends: (1 + tanh beta)/4 = e/(2e + 2/e)
    r = transfer_matrix_1d(Interaction(1, 0, 1), 2, "free")
    p_pp = (1 + r.pair_correlations[0]) / 4
    assert p_pp == pytest.approx(math.e / (2 * math.e + 2 / math.e), abs=1e-12)
    # the closed form is 0.4403985...; the quoted 0.440409 agrees to four decimals only
    assert p_pp == pytest.approx(0.4404, abs=1e-4)


def test_kernel_overflow_guard():
    law = gibbs_kernel(Interaction(1, 0, 500.0), cube(1), all_plus())
    assert np.isfinite(law.probabilities).all()
    assert law.probabilities[-1] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2), st.floats(-1, 1), st.floats(-1, 1))
def test_kernel_rows_are_probabilities(beta, J, h):
    spec = GibbsSpecification(Interaction(J, h, beta), 1)
    table = spec.table(Region.of([0, 1]))
    assert np.all(table.rows >= 0)
    assert np.allclose(table.rows.sum(axis=1), 1.0, atol=1e-12)


def test_finite_measure_validation():
    with pytest.raises(ValueError):
        FiniteMeasure(ORIGIN, np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        FiniteMeasure(ORIGIN, np.array([1.5, -0.5]))
    with pytest.raises(ValueError):
        KernelTable(ORIGIN, ORIGIN, np.ones((2, 2)) / 2)


# --- properness and consistency --------------------------------------------------


def test_properness_examples():
    spec = GibbsSpecification(Interaction(1, 0.2, 0.8), 1)
    B = indicator(Region.of([1]), lambda c: c[0] > 0)
    plus_b = from_values(cube(1), [1, 1, 1])
    minus_b = from_values(cube(1), [1, 1, -1])
    assert properness_check(spec, ORIGIN, B, plus_b) == 0.0
    assert properness_check(spec, ORIGIN, B, minus_b) == 0.0
    whole = LocalFunction(Region(()), np.array([1.0]))
    assert properness_check(spec, ORIGIN, whole, plus_b) == 0.0
    with pytest.raises(ValueError):
        properness_check(spec, ORIGIN, spin((0,)), plus_b)


def test_consistency_example_three_sites():
    spec = GibbsSpecification(Interaction(1, 0.3, 0.9), 1)
    for b in configurations(2):
        bnd = from_values(Region.of([-2, 2]), b)
        assert consistency_check(spec, ORIGIN, cube(1), bnd) < 1e-12
        assert consistency_check(spec, cube(1), cube(1), bnd) < 1e-15


class _Mismatched:
    """Outer kernel at one temperature, inner kernels at another."""

    def __init__(self, outer_beta, inner_beta, outer):
        self.outer = GibbsSpecification(Interaction(1, 0, outer_beta))
        self.inner = GibbsSpecification(Interaction(1, 0, inner_beta))
        self.outer_region = outer

    def kernel(self, region, boundary):
        src = self.outer if region == self.outer_region else self.inner
        return src.kernel(region, boundary)


def test_mismatched_temperatures_break_consistency():
    gamma = _Mismatched(1.0, 0.5, cube(1))
    assert consistency_check(gamma, ORIGIN, cube(1), all_plus()) > 0.01


@pytest.mark.parametrize("beta", [0.0, 0.6, 1.3])
def test_vectorized_residuals_match_direct_composition(beta):
    spec = GibbsSpecification(Interaction(1, 0.25, beta), 2)
    outer = Region.of([(0, 0), (0, 1), (1, 0)])
    inner = Region.of([(0, 0)])
    res = consistency_residuals(spec, inner, outer)
    dep = spec.dependence(outer)
    cfg = configurations(len(dep))
    for b in range(0, len(cfg), 97):
        direct = consistency_check(spec, inner, outer, boundary_configuration(dep, cfg[b]))
        assert res[b] == pytest.approx(direct, abs=1e-14)


def test_axiom_sweep_small():
    sweep = axiom_sweep(GibbsSpecification(Interaction(1, 0.1, 0.7), 1), cube(2))
    assert sweep.max_properness == 0.0
    assert sweep.max_consistency < 1e-12
    # nested pairs of nonempty subsets of a 5-site cube: sum over k of C(5,k) (2^k - 1)
    assert sweep.pairs == sum(math.comb(5, k) * (2**k - 1) for k in range(1, 6))


# --- DLR ---------------------------------------------------------------------------


def test_dlr_exact_gibbs():
    phi = Interaction(1, 0.1, 0.9)
    mu = enumerate_measure(phi, cube(3), all_plus())
    assert dlr_residual(mu, GibbsSpecification(phi), ORIGIN) < 1e-12
    assert dlr_residual(mu, GibbsSpecification(phi), cube(1)) < 1e-12


def test_dlr_point_mass_and_fixed_point():
    spec = GibbsSpecification(Interaction(1, 0, 0.7))
    W = cube(2)
    delta = FiniteMeasure.point_mass(W, np.ones(5))
    assert dlr_residual(delta, spec, ORIGIN) > 0.01
    once = apply_kernel(delta, spec, ORIGIN)
    assert dlr_residual(once, spec, ORIGIN) < 1e-12


def test_dlr_rejects_edge_volume():
    spec = GibbsSpecification(Interaction())
    with pytest.raises(ValueError):
        dlr_residual(FiniteMeasure.uniform(cube(1)), spec, Region.of([1]))


# --- monotonicity -------------------------------------------------------------------


def test_upsets_count():
    # Dedekind numbers: up-sets of the Boolean lattice on k atoms
    assert [len(upsets(k)) for k in range(0, 4)] == [2, 3, 6, 20]


@pytest.mark.parametrize("J,beta,expected", [(1.0, 1.0, True), (-1.0, 1.0, False), (-1.0, 0.0, True)])
def test_monotonicity_examples(J, beta, expected):
    verdict = monotonicity_check(GibbsSpecification(Interaction(J, 0, beta)).table(ORIGIN))
    assert verdict.preserving is expected
    if not expected:
        mask, lo, hi = verdict.witness
        assert lo < hi and verdict.violation > 0


def test_monotonicity_2d_block():
    table = GibbsSpecification(Interaction(1, 0.3, 0.8), 2).table(Region.of([(0, 0), (0, 1)]))
    assert monotonicity_check(table).preserving


def test_domination_violation_min_cut_agrees_with_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.dirichlet(np.ones(32))
        b = rng.dirichlet(np.ones(32))
        mask, val = _max_closure(a - b, 5)
        ups = upsets(5).astype(float)
        best = float(np.max(ups @ (a - b)))
        assert val == pytest.approx(best, abs=1e-12)
        assert float(np.dot(mask, a - b)) == pytest.approx(best, abs=1e-12)
        assert domination_violation(a, b, 5)[0] == pytest.approx(best, abs=1e-12)


def test_sandwich_on_catalogue():
    spec = GibbsSpecification(Interaction(1, 0.2, 0.9), 2)
    vol = Region.of([(0, 0), (1, 0)])
    table = spec.table(vol)
    lo, hi = table.rows[0], table.rows[-1]
    for f in increasing_catalogue(vol):
        vals = table.rows @ f.table
        assert np.all(vals >= lo @ f.table - 1e-12)
        assert np.all(vals <= hi @ f.table + 1e-12)


# --- directional limits -----------------------------------------------------------------


def test_directional_limit_stabilizes_for_finite_range():
    spec = GibbsSpecification(Interaction(1, 0.1, 1.0))
    omega = alternating()
    S = cube(1)
    res = directional_limit_kernel(spec, ORIGIN, omega, -1, S)
    assert res.stabilized
    assert total_variation(res.law, spec.kernel(ORIGIN, omega)) == 0.0
    res = directional_limit_kernel(spec, ORIGIN, all_plus(), -1, ORIGIN.union(outer_boundary(ORIGIN)))
    assert total_variation(res.law, spec.kernel(ORIGIN, all_plus())) == 0.0
    assert not directional_limit_kernel(spec, ORIGIN, omega, 1, ORIGIN).stabilized


def test_directional_limits_monotone_for_renormalized_kernel():
    strip = RenormalizedStrip(Interaction(1, 0, 1.0), Transformation.kadanoff(0.8, 1), horizon=64)
    omega = alternating()
    ups, downs = [], []
    for n in range(0, 7):
        S = cube(n)
        ups.append(directional_limit_kernel(strip, ORIGIN, omega, 1, S).law.probabilities[1])
        downs.append(directional_limit_kernel(strip, ORIGIN, omega, -1, S).law.probabilities[1])
    assert np.all(np.diff(ups) <= 1e-13)
    assert np.all(np.diff(downs) >= -1e-13)
    assert downs[-1] <= ups[-1]
