import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fpmv import evolve as ev
from fpmv import grid as gr
from fpmv import sde
from fpmv.coeffs import CoefficientSet


def frozen_trace(f: gr.DensityField, T: float, steps: int) -> ev.EvolutionTrace:
    """Trace that keeps `f` fixed; enough for coefficients that ignore u."""
    return ev.EvolutionTrace(f.grid, np.linspace(0.0, T, steps + 1), [f] * (steps + 1), [])


def test_amplitude_examples():
    assert np.allclose(sde.diffusion_amplitude(0.5 * np.eye(2)), np.eye(2), atol=1e-15)
    assert np.allclose(sde.diffusion_amplitude(np.diag([2.0, 8.0])), np.diag([2.0, 4.0]), atol=1e-14)
    assert np.allclose(sde.diffusion_amplitude(np.diag([2.0, 8.0]), "paper_literal"),
                       np.diag([math.sqrt(2), math.sqrt(8)]), atol=1e-14)
    assert sde.diffusion_amplitude(np.array([[0.5]]))[0, 0] == 1.0
    with pytest.raises(sde.NotPSD):
        sde.diffusion_amplitude(np.diag([1.0, -1e-9]))
    with pytest.raises(ValueError):
        sde.diffusion_amplitude(np.eye(2), "other")
    # tiny negative eigenvalues are clipped
    s = sde.diffusion_amplitude(np.diag([1.0, -1e-13]))
    assert s[1, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_amplitude_reconstructs_random_spd(d, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d))
    a = m @ m.T + 0.1 * np.eye(d)
    s = sde.diffusion_amplitude(a)
    assert np.allclose(s, s.T, atol=0)
    assert np.max(np.abs(s @ s.T - 2 * a)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


def test_deterministic_flow_translates_exactly():
    g = gr.Grid(1, 4.0, 80)
    f = g.sample(lambda x: np.exp(-(x**2))).normalized()
    cs = CoefficientSet.from_strings([["0"]], ["1"], mode="degenerate")
    ens = sde.simulate(frozen_trace(f, 1.0, 8), cs, 2000, 1e-3, seed=3)
    shift = ens[-1].positions - ens[0].positions
    assert np.allclose(shift, 1.0, rtol=0, atol=1e-12)


def test_variance_rate_from_point_mass():
    g = gr.Grid(1, 8.0, 1600)
    vals = np.zeros(g.size)
    vals[g.n // 2] = 1.0
    f = g.field(vals).normalized()
    cs = CoefficientSet.from_strings([["0.5"]], ["0"], gamma=0.5)
    N = 40000
    ens = sde.simulate(frozen_trace(f, 1.0, 10), cs, N, 1e-2, seed=11)
    var = np.var(ens[-1].positions[:, 0]) - np.var(ens[0].positions[:, 0])
    assert abs(var - 1.0) <= 3 * math.sqrt(2 / N)


def test_mean_and_covariance_rates_in_2d():
    g = gr.Grid(2, 6.0, 24)
    f = g.sample(lambda x, y: np.exp(-(x**2 + y**2))).normalized()
    a = np.array([[1.0, 0.3], [0.3, 0.5]])
    b = np.array([0.5, -0.2])
    cs = CoefficientSet.from_strings([["1", "0.3"], ["", "0.5"]], ["0.5", "-0.2"], gamma=0.3)
    N, T = 40000, 1.0
    ens = sde.simulate(frozen_trace(f, T, 4), cs, N, 0.05, seed=5)
    inc = ens[-1].positions - ens[0].positions
    cov = 2 * a * T
    se_mean = np.sqrt(np.diag(cov) / N)
    assert np.all(np.abs(inc.mean(axis=0) - b * T) <= 3 * se_mean)
    emp = np.cov(inc.T)
    se_var = np.sqrt(2 / N) * np.diag(cov)
    assert np.all(np.abs(np.diag(emp) - np.diag(cov)) <= 3 * se_var)


def test_same_seed_is_bit_identical_across_thread_counts():
    g = gr.Grid(1, 6.0, 120)
    cs = CoefficientSet.from_strings([["1 + u^2/(1+u^2)"]], ["tanh(u)"], gamma=1.0, b_inf=1.0)
    tr = ev.evolve(g.sample(lambda x: np.exp(-(x**2))).normalized(), 0.2, 4, cs)
    kw = dict(N=40000, dt=0.01, seed=9)
    e1 = sde.simulate(tr, cs, **kw)
    e2 = sde.simulate(tr, cs, **kw)
    e3 = sde.simulate(tr, cs, threads=3, **kw)
    for a, b, c in zip(e1, e2, e3):
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.positions, c.positions)
    other = sde.simulate(tr, cs, N=40000, dt=0.01, seed=10)
    assert not np.array_equal(other[-1].positions, e1[-1].positions)
    assert [e.time for e in e1] == list(tr.times)
    with pytest.raises(ValueError):
        sde.simulate(tr, cs, N=10, dt=0.1, seed=0)


def test_escaped_particles_are_reported():
    g = gr.Grid(1, 1.0, 20)
    f = g.field(np.ones(20)).normalized()
    cs = CoefficientSet.from_strings([["1"]], ["0"], gamma=1.0)
    ens = sde.simulate(frozen_trace(f, 1.0, 4), cs, 5000, 0.05, seed=0)
    assert ens[0].escaped_fraction == 0.0
    assert ens[-1].escaped_fraction > 0.3
    assert ens[-1].count == 5000


def test_interpolation_is_exact_at_centres_and_zero_outside():
    g = gr.Grid(2, 2.0, 10)
    f = g.sample(lambda x, y: 1 + x + 2 * y)
    pts = g.points()
    assert np.allclose(sde.interpolate(f.values, g, pts), f.values, atol=1e-14)
    mid = np.array([[0.1, 0.3]])
    assert sde.interpolate(f.values, g, mid)[0] == pytest.approx(1 + 0.1 + 0.6, abs=1e-14)
    assert sde.interpolate(f.values, g, np.array([[2.01, 0.0], [0.0, -3.0]])).tolist() == [0, 0]


def test_marginal_examples():
    g = gr.Grid(2, 2.0, 8)
    ens = sde.ParticleEnsemble(np.full((100, 2), 0.1), 0.0, 0)
    est = sde.estimate_marginal(ens, g)
    assert est.values.max() == pytest.approx(1 / g.cell_volume)
    assert np.count_nonzero(est.values) == 1
    with pytest.raises(ValueError):
        sde.estimate_marginal(sde.ParticleEnsemble(np.zeros((0, 2)), 0.0, 0), g)


def test_uniform_histogram_within_binomial_bounds():
    g = gr.Grid(2, 1.0, 10)
    N = 10**6
    pts = np.random.default_rng(1).uniform(-1, 1, (N, 2))
    est = sde.estimate_marginal(sde.ParticleEnsemble(pts, 0.0, 1), g)
    p = g.cell_volume / 4.0
    sd = math.sqrt(N * p * (1 - p)) / (N * g.cell_volume)
    assert np.all(np.abs(est.values - 0.25) <= 5 * sd)


def test_w1_and_ks_against_independent_computations():
    rng = np.random.default_rng(2)
    g = gr.Grid(1, 3.0, 30)
    mass = g.sample(lambda x: np.exp(-(x**2)) * (1 + 0.5 * np.sin(2 * x))).values * g.h
    samples = rng.normal(0.2, 0.8, 3000)
    edges = -g.L + g.h * np.arange(g.n + 1)
    cdf = np.concatenate([[0], np.cumsum(mass)]) / mass.sum()
    F = lambda x: np.interp(x, edges, cdf, left=0.0, right=1.0)  # noqa: E731
    # W1 by brute-force integration of |F_N - F| on a fine grid
    xs = np.linspace(-8, 8, 4_000_001)
    fn = np.searchsorted(np.sort(samples), xs, side="right") / samples.size
    brute = integrate.trapezoid(np.abs(fn - F(xs)), xs)
    assert sde.wasserstein1(samples, mass, g.L, g.h) == pytest.approx(brute, abs=2e-5)
    ks = stats.kstest(samples, F).statistic
    assert sde.ks_statistic(samples, mass, g.L, g.h) == pytest.approx(ks, abs=1e-12)


def test_w1_matches_scipy_for_point_cells():
    # a density concentrated on one tiny cell acts like a point mass
    g = gr.Grid(1, 1.0, 2000)
    mass = np.zeros(g.n)
    mass[1000] = 1.0
    samples = np.array([-0.5, 0.0, 0.25, 0.75])
    got = sde.wasserstein1(samples, mass, g.L, g.h)
    want = stats.wasserstein_distance(samples, [g.centers[1000]])
    assert got == pytest.approx(want, abs=g.h)


def test_perfect_sampler_w1_bound():
    g = gr.Grid(1, 8.0, 400)
    f = g.sample(lambda x: np.exp(-(x**2) / 2)).normalized()
    N = 10**5
    pts = sde.sample_density(f, N, np.random.default_rng(0))
    tr = frozen_trace(f, 1.0, 1)
    rows = sde.superposition_check(tr, [sde.ParticleEnsemble(pts, 0.0, 0)], [0.0])
    assert rows[0].w1[0] <= 4 * g.L / math.sqrt(N)
    assert rows[0].l1 >= 0 and rows[0].ks[0] >= 0


def test_nearest_snapshot_warning():
    g = gr.Grid(1, 4.0, 40)
    f = g.sample(lambda x: np.exp(-(x**2))).normalized()
    tr = frozen_trace(f, 1.0, 4)
    ens = [sde.ParticleEnsemble(sde.sample_density(f, 1000, np.random.default_rng(0)), t, 0)
           for t in tr.times]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = sde.superposition_check(tr, ens, [0.3])
    assert rows[0].time == 0.25
    assert caught


def test_two_dimensional_marginals():
    g = gr.Grid(2, 4.0, 40)
    f = g.sample(lambda x, y: np.exp(-(x**2) - 2 * y**2)).normalized()
    pts = sde.sample_density(f, 50000, np.random.default_rng(4))
    rows = sde.superposition_check(frozen_trace(f, 1.0, 1), [sde.ParticleEnsemble(pts, 0.0, 0)],
                                   [0.0])
    assert len(rows[0].w1) == 2 and max(rows[0].w1) < 0.02 and max(rows[0].ks) < 0.02


def test_csv_writers(tmp_path):
    ens = sde.ParticleEnsemble(np.array([[0.1, -0.2], [1.0 / 3.0, 2.0]]), 0.5, 0)
    sde.write_ensemble_csv(tmp_path / "e.csv", ens)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "particle_id,x1,x2"
    back = sde.read_ensemble_csv(tmp_path / "e.csv")
    assert np.array_equal(back.positions, ens.positions)
    rows = [sde.MarginalComparison(0.5, 2, 0.1, [0.01, 0.02], [0.03, 0.04])]
    sde.write_comparison_csv(tmp_path / "c.csv", rows)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "time,N,L1,W1_axis1,W1_axis2,KS_axis1,KS_axis2"
    assert lines[1].startswith("0.5,2,0.10000000000000001,")
