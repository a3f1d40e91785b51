"""Small builders shared by the test modules."""
import numpy as np

from chb_control.control import ControlProblem, Objective
from chb_control.mesh import StructuredGrid
from chb_control.model import InterpolationH, ModelParams, Potential
from chb_control.state import Scheme, SolverOptions


def disc(grid, center=None, radius=None, width=0.5):
    x, y = grid.coords
    cx, cy = center if center is not None else (grid.lx / 2, grid.ly / 2)
    r0 = radius if radius is not None else grid.lx / 4
    return np.tanh((r0 - np.hypot(x - cx, y - cy)) / width)


def make_scheme(nx=9, lx=4.0, T=0.1, dt=0.01, velocity=False, h="linear_clamp", pot=None,
                **params):
    grid = StructuredGrid(nx, nx, lx, lx)
    defaults = dict(proliferation_P=1.0, apoptosis_A=0.2, chemotaxis_chi=0.5, final_time_T=T)
    defaults.update(params)
    opts = SolverOptions(dt=dt, velocity_enabled=velocity)
    return Scheme(grid, ModelParams(**defaults), InterpolationH(h), pot or Potential.double_well(), opts)


def make_problem(scheme=None, alpha0=1.0, alpha1=1.0, kappa=0.1, lower=-1.0, upper=2.0, phi0=None,
                 phi_f=-1.0, phi_d=-1.0, **kw):
    scheme = scheme or make_scheme(**kw)
    phi0 = disc(scheme.grid) if phi0 is None else phi0
    obj = Objective(alpha0, alpha1, kappa, phi_f, phi_d)
    return ControlProblem(scheme, phi0, obj, lower, upper)


def random_control(problem, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return problem.project(scale * rng.standard_normal(problem.scheme.control_shape()))


def loglog_slope(eps, errors):
    return float(np.polyfit(np.log(eps), np.log(errors), 1)[0])
