import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chb_control.control import estimate_lipschitz
from chb_control.linalg import SolverDivergence
from chb_control.mesh import StructuredGrid
from chb_control.model import InterpolationH, ModelParams, Potential
from chb_control.state import Scheme, SolverOptions, StateSnapshot, ch_step, solve_brinkman, solve_nutrient, \
    solve_state

from helpers import disc, make_problem, make_scheme


def _scheme(nx=9, lx=1.0, dt=0.01, T=0.1, velocity=False, **params):
    opts = SolverOptions(dt=dt, velocity_enabled=velocity)
    return Scheme(StructuredGrid(nx, nx, lx, lx), ModelParams(final_time_T=T, **params), InterpolationH(),
                  Potential.double_well(), opts)


# -- options and containers --------------------------------------------------

def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(dt=0.0)
    with pytest.raises(ValueError):
        SolverOptions(dt=0.1, linear_tol=1e-3)
    with pytest.raises(ValueError):
        SolverOptions(dt=0.1, nonlinear_mode="picard")
    assert SolverOptions(dt=0.01).n_steps(0.2) == 20
    with pytest.raises(ValueError):
        SolverOptions(dt=0.03).n_steps(0.1)


def test_snapshot_rejects_non_finite():
    z = np.zeros(4)
    with pytest.raises(SolverDivergence):
        StateSnapshot(np.array([0, np.nan, 0, 0.0]), z, z, np.zeros((2, 4)), z)


# -- nutrient ------------------------------------------------------------------

def test_nutrient_constant_field_closed_form():
    sc = _scheme()
    sigma = solve_nutrient(sc, np.ones(sc.n))
    # oracle: b sigma_B / (b + h(1)) = 1 / 2
    assert np.max(np.abs(sigma - 0.5)) <= 1e-12


@pytest.mark.parametrize("phibar,b,sb", [(0.3, 2.0, 0.7), (-0.4, 0.5, 1.0), (2.0, 1.0, 0.25)])
def test_nutrient_closed_form_general(phibar, b, sb):
    sc = _scheme(nutrient_b=b, sigma_B=sb)
    sigma = solve_nutrient(sc, np.full(sc.n, phibar))
    expected = b * sb / (b + float(sc.h(phibar)))
    assert np.max(np.abs(sigma - expected)) <= 1e-12


def test_nutrient_pure_host():
    sc = _scheme(sigma_B=0.8)
    assert np.max(np.abs(solve_nutrient(sc, -np.ones(sc.n)) - 0.8)) <= 1e-13


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), nx=st.sampled_from([3, 5, 9]), b=st.floats(0.01, 50.0))
def test_nutrient_maximum_principle(seed, nx, b):
    rng = np.random.default_rng(seed)
    grid = StructuredGrid(nx, nx, 1.0, 1.0)
    sb = rng.random(grid.n_nodes)
    sc = Scheme(grid, ModelParams(nutrient_b=b, sigma_B=sb), InterpolationH(), Potential(), SolverOptions(dt=0.1))
    sigma = solve_nutrient(sc, 3 * rng.standard_normal(grid.n_nodes))
    assert sigma.min() >= -1e-10 and sigma.max() <= 1 + 1e-10
    assert sigma.max() <= sb.max() + 1e-10


# -- Brinkman ------------------------------------------------------------------------

def test_brinkman_constant_phase_gives_rest():
    sc = _scheme(velocity=True, chemotaxis_chi=0.5)
    phi = np.full(sc.n, 0.3)
    v, p = solve_brinkman(sc, phi, np.sin(np.arange(sc.n)), solve_nutrient(sc, phi))
    assert np.max(np.abs(v)) <= 1e-13 and np.max(np.abs(p)) <= 1e-13


def test_brinkman_linear_in_forcing():
    sc = _scheme(velocity=True)
    phi = disc(sc.grid, width=0.2)
    mu = np.cos(3 * sc.grid.coords[0])
    sigma = np.zeros(sc.n)
    v1, p1 = solve_brinkman(sc, phi, mu, sigma)
    v2, p2 = solve_brinkman(sc, phi, 2 * mu, sigma)
    assert np.allclose(v2, 2 * v1, rtol=1e-12, atol=1e-15)
    assert np.allclose(p2, 2 * p1, rtol=1e-12, atol=1e-15)


def test_brinkman_divergence_error_decreases_under_refinement():
    errs, hs = [], []
    for nx in (9, 17, 33):
        sc = _scheme(nx=nx, velocity=True, proliferation_P=1.0, apoptosis_A=0.3, chemotaxis_chi=0.5)
        x, y = sc.grid.coords
        phi = np.tanh((0.3 - np.hypot(x - 0.5, y - 0.5)) / 0.15)
        mu = np.sin(np.pi * x) * np.cos(np.pi * y)
        sigma = 0.5 + 0.25 * np.cos(np.pi * x)
        v, _ = sc.solve_brinkman(phi, mu, sigma)
        errs.append(sc.divergence_error(v, phi, sigma))
        hs.append(sc.grid.h)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 1.0


# -- Cahn-Hilliard step ------------------------------------------------------------

@pytest.mark.parametrize("value", [-1.0, 1.0])
def test_pure_phase_is_stationary(value):
    sc = _scheme()
    phi = np.full(sc.n, value)
    prev = sc.initial(phi)
    new_phi, new_mu = ch_step(sc, prev, np.zeros(sc.n), prev.sigma, np.zeros((2, sc.n)))
    assert np.max(np.abs(new_phi - value)) <= 1e-13
    assert np.max(np.abs(new_mu)) <= 1e-13


def test_mass_identity_reduced_mode():
    sc = make_scheme(nx=11, T=0.1)
    rng = np.random.default_rng(4)
    u = rng.random(sc.control_shape())
    tr = sc.solve(u, disc(sc.grid))
    mL = sc.mL
    for k in range(tr.n_steps):
        src = (sc.params.proliferation_P * tr.sigma[k + 1] - sc.params.apoptosis_A - u[k]) * sc.h(tr.phi[k])
        lhs = mL @ tr.phi[k + 1]
        rhs = mL @ tr.phi[k] + sc.dt * (mL @ src)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_time_step_convergence_first_order():
    ends = {}
    for dt in (0.02, 0.01, 0.005, 0.0025):
        sc = make_scheme(nx=9, T=0.2, dt=dt)
        tr = sc.solve(sc.zero_control(), disc(sc.grid))
        ends[dt] = tr.phi[-1]
    d1 = np.linalg.norm(ends[0.02] - ends[0.01])
    d2 = np.linalg.norm(ends[0.01] - ends[0.005])
    d3 = np.linalg.norm(ends[0.005] - ends[0.0025])
    assert np.log2(d1 / d2) >= 0.9 and np.log2(d2 / d3) >= 0.9


# -- full trajectories ---------------------------------------------------------------

def test_pure_host_trajectory():
    sc = make_scheme(velocity=True, sigma_B=0.7)
    tr = solve_state(sc, sc.zero_control(), -np.ones(sc.n))
    assert np.max(np.abs(tr.phi + 1.0)) <= 1e-12
    assert np.max(np.abs(tr.sigma - 0.7)) <= 1e-13
    assert np.max(np.abs(tr.vel)) <= 1e-13


def test_trajectory_shape_and_initial_state():
    sc = make_scheme()
    phi0 = disc(sc.grid)
    tr = sc.solve(sc.zero_control(), phi0)
    assert len(tr) == sc.n_steps + 1 == tr.phi.shape[0]
    assert np.array_equal(tr.phi[0], phi0)
    assert tr.times[-1] == pytest.approx(sc.params.final_time_T)
    ts = tr.timeseries()
    assert ts.shape == (sc.n_steps + 1, 6)
    with pytest.raises(ValueError):
        sc.solve(np.zeros((2, sc.n)), phi0)


def test_determinism_bit_identical():
    sc = make_scheme(velocity=True)
    u = np.random.default_rng(0).random(sc.control_shape())
    a = sc.solve(u, disc(sc.grid))
    b = make_scheme(velocity=True).solve(u, disc(sc.grid))
    for name in ("phi", "mu", "sigma", "vel", "pressure"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_full_mode_constraint_residual():
    sc = make_scheme(nx=13, velocity=True, T=0.2)
    u = np.random.default_rng(1).random(sc.control_shape())
    tr = sc.solve(u, disc(sc.grid))
    assert np.max(tr.diagnostics["constraint_residual"]) <= 10 * sc.opts.linear_tol
    assert np.max(np.abs(tr.vel)) > 0


def test_large_drag_recovers_reduced_model():
    kw = dict(nx=9, proliferation_P=0.0, apoptosis_A=0.0, chemotaxis_chi=0.5)
    full = make_scheme(velocity=True, permeability_nu=1e6, **kw)
    red = make_scheme(velocity=False, **kw)
    phi0 = disc(full.grid)
    a, b = full.solve(full.zero_control(), phi0), red.solve(red.zero_control(), phi0)
    assert np.max(np.abs(a.vel)) <= 1e-3
    assert np.max(np.abs(a.phi - b.phi)) <= 1e-4


def test_energy_decreases_without_sources():
    sc = make_scheme(nx=17, T=1.0, dt=0.01, proliferation_P=0.0, apoptosis_A=0.0, chemotaxis_chi=0.0)
    phi0 = 0.5 * np.random.default_rng(7).uniform(-1, 1, sc.n)
    tr = sc.solve(sc.zero_control(), phi0)
    e = tr.timeseries()[:, 2]
    assert tr.n_steps >= 100
    assert np.all(np.diff(e) <= 1e-12 * np.abs(e[:-1]))


def test_state_lipschitz_ratio_is_finite():
    problem = make_problem(nx=7, T=0.05, lower=0.0, upper=1.0)
    est = estimate_lipschitz(problem, "state", n_pairs=10, seed=3)
    assert 0 < est["value"] < np.inf
    assert est["label"] == "estimated lower bound"


# -- nonlinear modes and solver options -----------------------------------------------

def test_newton_and_linear_scheme_differ_at_first_order():
    gaps = []
    for dt in (0.005, 0.0025, 0.00125):
        sc = make_scheme(nx=9, T=0.05, dt=dt)
        sn = sc.with_options(nonlinear_mode="newton")
        phi0 = disc(sc.grid)
        a, b = sc.solve(sc.zero_control(), phi0), sn.solve(sn.zero_control(), phi0)
        gaps.append(np.max(np.abs(a.phi[-1] - b.phi[-1])))
    assert np.log2(gaps[0] / gaps[1]) >= 0.9 and np.log2(gaps[1] / gaps[2]) >= 0.9


def test_newton_failure_reports_step():
    sc = make_scheme(T=0.05).with_options(nonlinear_mode="newton", newton_max_iter=1, newton_tol=1e-14)
    with pytest.raises(SolverDivergence) as info:
        sc.solve(sc.zero_control(), disc(sc.grid))
    assert info.value.step == 1


def test_krylov_matches_direct():
    sc = make_scheme(velocity=True, T=0.05)
    sk = sc.with_options(linear_solver="krylov")
    phi0 = disc(sc.grid)
    u = np.random.default_rng(2).random(sc.control_shape())
    a, b = sc.solve(u, phi0), sk.solve(u, phi0)
    assert np.max(np.abs(a.phi - b.phi)) <= 1e-7


def test_upwind_option_runs_and_differs():
    sc = make_scheme(velocity=True, T=0.05)
    su = sc.with_options(upwind=True)
    phi0 = disc(sc.grid)
    a, b = sc.solve(sc.zero_control(), phi0), su.solve(su.zero_control(), phi0)
    assert np.all(np.isfinite(b.phi))
    assert 0 < np.max(np.abs(a.phi - b.phi)) < 0.1
