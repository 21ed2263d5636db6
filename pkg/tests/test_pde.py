import math

import numpy as np
import pytest

import fbsdelab as fl
from fbsdelab.errors import ConfigError, DivergenceError, SolverError
from fbsdelab.pde import GridSpec, GridSolution

from conftest import make_spec


def _mesh(grid):
    return np.meshgrid(grid.t_nodes, grid.x_nodes, indexing="ij")


def test_grid_spec_validation():
    with pytest.raises(ConfigError):
        GridSpec(np.array([0.0, 1.0]), np.array([0.0, 1.0]))  # too few x nodes
    with pytest.raises(ConfigError):
        GridSpec(np.array([0.0, 1.0]), np.array([0.0, 0.5, 0.7]))  # non-uniform
    with pytest.raises(ConfigError):
        GridSpec(np.array([0.0, 1.0]), np.linspace(0, 1, 5), boundary="weird")


def test_counter_u_error_below_1e3(counter):
    # 200 x 400 nodes on [0,1] x [-6,6]
    grid = GridSpec(np.linspace(0, 1, 200), np.linspace(-6, 6, 400))
    sol = fl.solve_u(counter, grid)
    T, X = _mesh(grid)
    assert np.max(np.abs(sol.u - counter.oracle.u(T, X))) < 1e-3


def test_constant_terminal_constant_solution():
    kappa = 2.5
    spec = make_spec(g=lambda x: kappa + 0.0 * np.asarray(x, dtype=float))
    grid = fl.default_grid(spec, nt=41, nx=101)
    sol = fl.solve_u(spec, grid)
    np.testing.assert_allclose(sol.u, kappa, atol=1e-12)


def test_quad_exp_cole_hopf_oracle(quad_exp, quad_grids):
    # u(t,x) = log E[exp(g(x + W_{T-t}))] via >= 64-node quadrature
    grid, su, _ = quad_grids
    T, X = _mesh(grid)
    interior = np.abs(X) <= 4.5
    oracle = quad_exp.oracle.y(T, X)
    assert np.max(np.abs(su.u - oracle)[interior]) < 1e-3


def test_uprime_heat_cubic():
    # h == 0, g = x^3: u'(t,x) = 3x^2 + 3(T-t) by the Gaussian moment identity
    spec = make_spec(g=lambda x: np.asarray(x, dtype=float) ** 3,
                     g1=lambda x: 3.0 * np.asarray(x, dtype=float) ** 2,
                     g2=lambda x: 6.0 * np.asarray(x, dtype=float))
    grid = fl.default_grid(spec, nt=101, nx=601, x_lo=-12, x_hi=12)
    sol = fl.solve_u_prime(spec, grid)
    T, X = _mesh(grid)
    interior = np.abs(X) <= 5
    exact = 3 * X**2 + 3 * (1 - T)
    assert np.max(np.abs(sol.u - exact)[interior]) < 2e-3


def test_uprime_counter_constant_in_x(counter, counter_grids):
    grid, su, sp = counter_grids
    T, X = _mesh(grid)
    exact = counter.oracle.u_x(T, X)
    assert np.max(np.abs(sp.u - exact)) < 1e-10


def test_uprime_zero_terminal_slope():
    spec = make_spec(g=lambda x: np.ones_like(np.asarray(x, dtype=float)),
                     g1=lambda x: np.zeros_like(np.asarray(x, dtype=float)))
    grid = fl.default_grid(spec, nt=41, nx=101)
    sol = fl.solve_u_prime(spec, grid)
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-12)


def test_udoubleprime_heat_cubic():
    spec = make_spec(g=lambda x: np.asarray(x, dtype=float) ** 3,
                     g1=lambda x: 3.0 * np.asarray(x, dtype=float) ** 2,
                     g2=lambda x: 6.0 * np.asarray(x, dtype=float))
    grid = fl.default_grid(spec, nt=101, nx=601, x_lo=-12, x_hi=12)
    sol = fl.solve_u_doubleprime(spec, grid)
    T, X = _mesh(grid)
    interior = np.abs(X) <= 5
    assert np.max(np.abs(sol.u - 6 * X)[interior]) < 1e-9


def test_udoubleprime_zero_preserved(quad_exp):
    # g'' == 0 with h_zz >= 0: zero is a solution and the scheme keeps it
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    spec = fl.preset("ex_quad_exp", g=lambda x: 0.3 + 0.0 * np.asarray(x, dtype=float),
                     g1=zero, g2=zero)
    grid = fl.default_grid(spec, nt=41, nx=101)
    sol = fl.solve_u_doubleprime(spec, grid)
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-12)


def test_udoubleprime_quad_exp_vs_quadrature(quad_exp, quad_grids):
    # second difference of the exponential-transform oracle, tol 5e-3
    grid, su, sp = quad_grids
    spp = fl.solve_u_doubleprime(quad_exp, grid, sol_u=su, sol_uprime=sp)
    ts = np.array([0.25, 0.5, 0.75])
    xs = np.linspace(-3, 3, 25)
    dh = 1e-3
    for t in ts:
        zplus = quad_exp.oracle.z(t, xs + dh)
        zminus = quad_exp.oracle.z(t, xs - dh)
        uxx = (zplus - zminus) / (2 * dh)
        got = spp.eval(t, xs)
        assert np.max(np.abs(got - uxx)) < 5e-3


def test_udoubleprime_blowup_gate():
    # h_zz far above the smallness window must trigger the divergence gate
    spec = make_spec(
        g=lambda x: np.tanh(np.asarray(x, dtype=float)) + 0.2 * np.asarray(x, dtype=float) ** 2 / (1 + np.asarray(x, dtype=float) ** 2),
        h=lambda t, x, y, z: 40.0 * np.asarray(z, dtype=float) ** 2,
        regime="quadratic")
    grid = fl.default_grid(spec, nt=201, nx=201)
    with pytest.raises((DivergenceError, SolverError)):
        fl.solve_u_doubleprime(spec, grid)


def test_eval_yz_examples(cubic, cubic_grids, counter, counter_grids):
    grid3, su3, sp3 = cubic_grids
    # bilinear interpolation carries an O(dx^2) curvature bias between nodes
    res = fl.eval_yz(su3, sp3, cubic, 0.5, 1.0)
    assert res.y == pytest.approx(4.0, abs=1e-3)
    assert res.z == pytest.approx(6.0, abs=1e-3)
    assert not res.extrapolated
    # terminal row reproduces g exactly at the grid nodes
    xn = float(grid3.x_nodes[650])
    res_T = fl.eval_yz(su3, sp3, cubic, 1.0, xn)
    assert res_T.y == pytest.approx(xn**3, abs=1e-12)
    # counter at the degenerate time: y = 0 for all x
    gridc, suc, spc = counter_grids
    # t* sits between grid rows; linear-in-time interpolation leaves O(dt^2)
    t_star = 2.0 - math.sqrt(3.0)
    for x in (-3.0, 0.0, 2.0):
        assert abs(fl.eval_yz(suc, spc, counter, t_star, x).y) < 1e-4
    # out-of-box query carries the extrapolation flag
    assert fl.eval_yz(su3, sp3, cubic, 0.5, 99.0).extrapolated


def test_grid_refinement_convergence(quad_exp):
    # halving dx and dt cuts the max oracle error by >= 3
    errs = []
    for nt, nx in ((51, 101), (101, 201)):
        grid = fl.default_grid(quad_exp, nt=nt, nx=nx)
        sol = fl.solve_u(quad_exp, grid)
        T, X = _mesh(grid)
        interior = np.abs(X) <= 4
        errs.append(np.max(np.abs(sol.u - quad_exp.oracle.y(T, X))[interior]))
    assert errs[1] < errs[0] / 3.0


def test_monotonicity_positive_slope():
    # g' >= 0 and h_x >= 0 keep u_x nonnegative
    spec = make_spec(g=lambda x: np.tanh(np.asarray(x, dtype=float)),
                     g1=lambda x: 1 / np.cosh(np.asarray(x, dtype=float)) ** 2,
                     h=lambda t, x, y, z: 0.1 * np.asarray(x, dtype=float) + 0.0 * np.asarray(t, dtype=float))
    grid = fl.default_grid(spec, nt=81, nx=201)
    sol = fl.solve_u(spec, grid)
    assert np.min(sol.u_x) > -1e-8


def test_selfconsistency_ux_columns(quad_grids):
    # u_x equals centered differences of u (construction invariant)
    _, su, _ = quad_grids
    dx = su.x_nodes[1] - su.x_nodes[0]
    manual = (su.u[:, 2:] - su.u[:, :-2]) / (2 * dx)
    np.testing.assert_allclose(su.u_x[:, 1:-1], manual, atol=1e-12)


def test_terminal_rows(cubic, cubic_grids):
    grid, su, sp = cubic_grids
    np.testing.assert_allclose(su.u[-1], cubic.g(grid.x_nodes), atol=0)
    np.testing.assert_allclose(sp.u[-1], cubic.d("g1")(grid.x_nodes), atol=0)


def test_dirichlet_boundary_runs(counter):
    grid = fl.default_grid(counter, nt=41, nx=101, boundary="dirichlet")
    sol = fl.solve_u(counter, grid)
    # edges pinned at the terminal values
    np.testing.assert_allclose(sol.u[:, 0], counter.g(grid.x_nodes[0]), atol=1e-12)


def test_explicit_scheme_cfl_guard(counter):
    grid = fl.default_grid(counter, nt=11, nx=401)
    with pytest.raises(ConfigError):
        fl.solve_u(counter, grid, theta=0.0)


def test_binary_roundtrip(tmp_path, counter_grids):
    _, su, _ = counter_grids
    p = tmp_path / "sol.bin"
    su.to_binary(p)
    back = GridSolution.from_binary(p)
    np.testing.assert_array_equal(back.u, su.u)
    np.testing.assert_array_equal(back.x_nodes, su.x_nodes)


def test_csv_export(tmp_path, counter_grids):
    _, su, _ = counter_grids
    p = tmp_path / "sol.csv"
    su.to_csv(p, header_lines=["seed=0"])
    lines = p.read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "t,x,u,u_x,u_xx"
    assert len(lines) == 2 + su.u.size
