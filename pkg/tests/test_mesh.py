import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from chb_control import _kernels
from chb_control.mesh import (GridMismatchError, StructuredGrid, assemble_brinkman_operator, assemble_mass,
                              assemble_stiffness_neumann, inner, lumped_mass, norm, read_scalar_csv,
                              read_vector_csv, write_scalar_csv, write_vector_csv)
from chb_control.model import ModelParams

UNIT = StructuredGrid(9, 9)


def test_grid_validation():
    with pytest.raises(ValueError):
        StructuredGrid(2, 5)
    with pytest.raises(ValueError):
        StructuredGrid(5, 5, lx=0.0)
    g = StructuredGrid(5, 3, 2.0, 1.0)
    assert (g.hx, g.hy, g.n_nodes) == (0.5, 0.5, 15)
    x, y = g.coords
    assert x[1] == 0.5 and y[5] == 0.5   # x runs fastest


def test_mass_examples():
    M = assemble_mass(UNIT)
    one = np.ones(UNIT.n_nodes)
    x, _ = UNIT.coords
    assert one @ M @ one == pytest.approx(1.0, abs=1e-14)
    assert x @ M @ one == pytest.approx(0.5, abs=1e-14)
    assert abs(M - M.T).max() == 0.0
    assert np.min(np.linalg.eigvalsh(M.toarray())) > 0


def test_lumped_mass_preserves_total():
    g = StructuredGrid(7, 11, 2.0, 3.0)
    M = assemble_mass(g)
    assert np.sum(lumped_mass(g)) == pytest.approx(M.sum(), rel=1e-14)
    assert np.sum(lumped_mass(g)) == pytest.approx(6.0, rel=1e-14)
    assert np.allclose(assemble_mass(g, lumped=True).diagonal(), lumped_mass(g))


def test_stiffness_examples():
    K = assemble_stiffness_neumann(UNIT)
    assert np.max(np.abs(K @ np.ones(UNIT.n_nodes))) < 1e-13
    assert abs(K - K.T).max() == 0.0
    evals = np.linalg.eigvalsh(K.toarray())
    assert evals[0] > -1e-12 and evals[1] > 1e-6     # one-dimensional kernel


def test_stiffness_quadratic_converges_second_order():
    # oracle: int_0^1 int_0^1 |grad x^2|^2 = 4/3
    errs, hs = [], []
    for n in (5, 9, 17, 33):
        g = StructuredGrid(n, n)
        x, _ = g.coords
        f = x ** 2
        errs.append(abs(f @ assemble_stiffness_neumann(g) @ f - 4 / 3))
        hs.append(g.h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.9
    assert errs[-1] < 1e-3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_integration_by_parts(seed):
    rng = np.random.default_rng(seed)
    g = StructuredGrid(6, 5, 1.5, 0.7)
    f, h = rng.standard_normal((2, g.n_nodes))
    K = assemble_stiffness_neumann(g)
    grad_pair = np.sum(g.qweight * (g.gather(f, "dx") * g.gather(h, "dx") + g.gather(f, "dy") * g.gather(h, "dy")))
    assert f @ K @ h == pytest.approx(grad_pair, rel=1e-12, abs=1e-12)


def test_brinkman_zero_rhs_and_symmetry():
    p = ModelParams()
    B = assemble_brinkman_operator(UNIT, p)
    n = UNIT.n_nodes
    sol = spla.spsolve(B.tocsc(), np.zeros(3 * n))
    assert np.all(sol == 0)
    Avv = B[: 2 * n, : 2 * n]
    assert abs(Avv - Avv.T).max() < 1e-14
    assert abs(B - B.T).max() < 1e-14    # the whole saddle operator is symmetric
    with pytest.raises(ValueError, match="singular_system"):
        assemble_brinkman_operator(UNIT, type("P", (), {"shear_eta": 1.0, "bulk_lambda": 0.0,
                                                         "permeability_nu": 0.0})())


def test_brinkman_full_rank():
    g = StructuredGrid(8, 6, 2.0, 1.0)
    B = assemble_brinkman_operator(g, ModelParams(bulk_lambda=0.5))
    b = np.random.default_rng(3).standard_normal(B.shape[0])
    x = spla.spsolve(B.tocsc(), b)
    assert np.linalg.norm(B @ x - b) / np.linalg.norm(b) <= 1e-8


@pytest.mark.parametrize("n", [5, 9, 17])
def test_brinkman_manufactured_rotation(n):
    # v = c (y, -x) has D v = 0 and div v = 0, so T(v, 0) n = 0 and nu v = f
    g = StructuredGrid(n, n, 1.0, 1.0)
    p = ModelParams(permeability_nu=2.0, shear_eta=0.7, bulk_lambda=0.3)
    x, y = g.coords
    c = 1.3
    vx, vy = c * y, -c * x
    M = assemble_mass(g)
    rhs = np.concatenate([p.permeability_nu * (M @ vx), p.permeability_nu * (M @ vy), np.zeros(g.n_nodes)])
    sol = spla.spsolve(assemble_brinkman_operator(g, p).tocsc(), rhs)
    err = np.sqrt(inner(g, sol[: g.n_nodes] - vx, sol[: g.n_nodes] - vx)
                  + inner(g, sol[g.n_nodes: 2 * g.n_nodes] - vy, sol[g.n_nodes: 2 * g.n_nodes] - vy))
    assert err <= g.h ** 2
    assert np.max(np.abs(sol[2 * g.n_nodes:])) <= 1e-10


def test_norm_examples():
    one = np.ones(UNIT.n_nodes)
    x, _ = UNIT.coords
    assert norm(UNIT, one, "L2") == pytest.approx(1.0)
    assert norm(UNIT, one, "H1") == pytest.approx(1.0)
    assert norm(UNIT, x, "Linf") == 1.0
    assert norm(UNIT, one, "Lp", p=4) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        norm(UNIT, one, "Lp", p=7)
    with pytest.raises(GridMismatchError):
        norm(UNIT, np.ones(5))
    with pytest.raises(GridMismatchError):
        inner(UNIT, one, np.ones(UNIT.n_nodes + 1))


def test_csv_round_trip(tmp_path):
    g = StructuredGrid(4, 3, 1.0, 2.0)
    rng = np.random.default_rng(0)
    f, v = rng.standard_normal(g.n_nodes), rng.standard_normal((2, g.n_nodes))
    write_scalar_csv(tmp_path / "f.csv", g, f)
    write_vector_csv(tmp_path / "v.csv", g, v)
    assert np.array_equal(read_scalar_csv(tmp_path / "f.csv", g), f)
    assert np.array_equal(read_vector_csv(tmp_path / "v.csv", g), v)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "x,y,value"
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "x,y,vx,vy"
    with pytest.raises(GridMismatchError):
        read_scalar_csv(tmp_path / "f.csv", StructuredGrid(3, 4, 1.0, 2.0))


def test_assembly_is_reproducible():
    g = StructuredGrid(10, 7, 1.0, 1.0)
    coef = np.random.default_rng(1).standard_normal((len(g.conn), 4))
    A1, A2 = g.pair(coef, "dx", "val"), g.pair(coef, "dx", "val")
    assert (A1 != A2).nnz == 0


def test_kernel_backends_agree():
    g = StructuredGrid(11, 8, 1.0, 2.0)
    rng = np.random.default_rng(2)
    t = g.tables
    f = rng.standard_normal(g.n_nodes)
    qv = rng.standard_normal((len(g.conn), 4))
    assert np.allclose(_kernels.gather_numpy(g.conn, f, t["dx"]), _kernels.gather(g.conn, f, t["dx"]),
                       rtol=1e-14, atol=1e-14)
    assert np.allclose(_kernels.scatter_numpy(g.conn, qv, t["dy"], g.qweight, g.n_nodes),
                       _kernels.scatter(g.conn, qv, t["dy"], g.qweight, g.n_nodes), rtol=1e-13, atol=1e-14)
    assert np.allclose(_kernels.pair_numpy(g.conn, qv, t["val"], t["dx"], g.qweight),
                       _kernels.pair(g.conn, qv, t["val"], t["dx"], g.qweight), rtol=1e-13, atol=1e-14)


def test_backend_env_flag(monkeypatch):
    monkeypatch.setenv("CHB_NUMBA", "0")
    assert _kernels.backend() == "numpy"
    monkeypatch.setenv("CHB_NUMBA", "1")
    assert _kernels.backend() == ("numba" if _kernels.HAVE_NUMBA else "numpy")
