import numpy as np
import pytest

from chb_control.adjoint import AdjointRHS, frechet_costate, solve_adjoint_general, solve_costate, time_weights
from chb_control.control import Objective, estimate_lipschitz
from chb_control.sensitivity import frechet_state
from chb_control.verify import duality_check, gradient_check, taylor_costate

from helpers import disc, make_problem, make_scheme

COSTATE = ("phi_a", "tau", "rho", "w", "q")


@pytest.fixture(scope="module", params=["reduced", "full"])
def base(request):
    sc = make_scheme(nx=9, T=0.1, velocity=request.param == "full")
    u = np.random.default_rng(0).random(sc.control_shape())
    return sc.solve(u, disc(sc.grid))


def _max_abs(co):
    return max(np.max(np.abs(getattr(co, f))) for f in COSTATE)


def test_time_weights():
    w = time_weights(4, 0.25)
    assert np.allclose(w, [0.125, 0.25, 0.25, 0.25, 0.125])
    assert w.sum() == pytest.approx(1.0)


def test_zero_data_gives_zero(base):
    co = solve_adjoint_general(base, AdjointRHS.zeros(base.n_steps + 1, base.scheme.n))
    assert _max_abs(co) == 0.0
    assert co.kind == "costate" and len(co) == base.n_steps + 1


def test_scaling_and_terminal_datum(base):
    rng = np.random.default_rng(1)
    G = AdjointRHS.random(rng, base.n_steps + 1, base.scheme.n)
    a, b = solve_adjoint_general(base, G), solve_adjoint_general(base, G.scaled(-2.5))
    for f in COSTATE:
        assert np.max(np.abs(getattr(b, f) + 2.5 * getattr(a, f))) <= 1e-10 * _max_abs(a)
    assert np.array_equal(a.phi_a[-1], G.G0)


def test_stability_ratio(base):
    rng = np.random.default_rng(2)
    ratios = []
    for _ in range(5):
        G = AdjointRHS.random(rng, base.n_steps + 1, base.scheme.n)
        ratios.append(solve_adjoint_general(base, G).norm() / G.norm(base))
    assert np.all(np.isfinite(ratios)) and max(ratios) / min(ratios) < 10.0


def test_costate_vanishes_without_tracking(base):
    assert _max_abs(solve_costate(base, Objective(0.0, 0.0, 1.0))) == 0.0
    # terminal target hit exactly and no running cost
    co = solve_costate(base, Objective(1.0, 0.0, 1.0, phi_f=base.phi[-1].copy()))
    assert _max_abs(co) == 0.0


def test_costate_terminal_value(base):
    obj = Objective(2.0, 0.5, 1.0, phi_f=0.3, phi_d=-1.0)
    co = solve_costate(base, obj)
    assert np.allclose(co.phi_a[-1], 2.0 * (base.phi[-1] - 0.3))


def test_rhs_shape_checked(base):
    with pytest.raises(ValueError):
        solve_adjoint_general(base, AdjointRHS.zeros(base.n_steps, base.scheme.n))


def test_adjoint_velocity_divergence_free():
    sc = make_scheme(nx=9, T=0.1, velocity=True)
    base = sc.solve(np.random.default_rng(3).random(sc.control_shape()), disc(sc.grid))
    co = solve_costate(base, Objective(1.0, 1.0, 0.1, phi_f=-1.0, phi_d=-1.0))
    assert np.max(co.diagnostics["divergence_residual"]) <= 10 * sc.opts.linear_tol
    assert np.max(np.abs(co.w)) > 0


@pytest.mark.parametrize("velocity", [False, True])
def test_duality(velocity):
    problem = make_problem(nx=9, T=0.1, velocity=velocity)
    r = duality_check(problem, n_pairs=5, seed=4)
    assert r["passed"], r["max_relative_error"]
    assert r["max_relative_error"] <= 10 * problem.scheme.opts.linear_tol


@pytest.mark.parametrize("velocity,tol", [(False, 1e-3), (True, 1e-2)])
def test_gradient_matches_finite_differences(velocity, tol):
    problem = make_problem(nx=9, T=0.1, velocity=velocity)
    r = gradient_check(problem, n_samples=3, seed=5, tol=tol)
    assert r["passed"], r["max_relative_error"]


def test_frechet_costate_zero_and_linear(base):
    sc = base.scheme
    obj = Objective(1.0, 1.0, 0.1, phi_f=-1.0, phi_d=-1.0)
    co = solve_costate(base, obj)
    zero = np.zeros(sc.control_shape())
    d0 = frechet_costate(base, zero, co, frechet_state(base, zero), obj)
    assert _max_abs(d0) == 0.0
    rng = np.random.default_rng(6)
    h1, h2 = rng.standard_normal((2, *sc.control_shape()))

    def d(h):
        return frechet_costate(base, h, co, frechet_state(base, h), obj)

    a, b, s = d(h1), d(h2), d(h1 + h2)
    scale = _max_abs(a) + _max_abs(b)
    for f in COSTATE:
        assert np.max(np.abs(getattr(s, f) - getattr(a, f) - getattr(b, f))) <= 1e-10 * scale


@pytest.mark.parametrize("velocity", [False, True])
def test_costate_taylor_remainder(velocity):
    problem = make_problem(nx=13, T=0.2, velocity=velocity)
    r = taylor_costate(problem, seed=0)
    assert r["order"]["fitted"] >= 1.6


def test_costate_lipschitz_ratio_is_finite():
    problem = make_problem(nx=7, T=0.05, lower=0.0, upper=1.0)
    est = estimate_lipschitz(problem, "costate", n_pairs=6, seed=1, norm_spec="all_L2")
    assert 0 < est["value"] < np.inf
