import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import fbsdelab as fl
from fbsdelab.errors import EvaluationError, UnknownPresetError
from fbsdelab.model import AssumptionVerdict, GridBox, default_box

from conftest import make_spec


def test_unknown_preset():
    with pytest.raises(UnknownPresetError):
        fl.preset("no_such_model")
    assert set(fl.preset_names()) == {"ex_counter", "ex_cubic", "ex_quad_exp"}


def test_counter_oracle_values(counter):
    # coefficient -1/2 + 2t - t^2/2 vanishes at t = 2 - sqrt(3)
    t_star = 2.0 - math.sqrt(3.0)
    assert abs(counter.oracle.y(t_star, 1.7)) < 1e-14
    assert counter.oracle.y(0.5, 2.0) == pytest.approx(0.75)
    assert counter.oracle.z(0.5, 123.0) == pytest.approx(0.375)


def test_cubic_oracle_values(cubic):
    assert cubic.oracle.y(0.5, 1.0) == pytest.approx(4.0)
    assert cubic.oracle.z(0.5, 1.0) == pytest.approx(6.0)
    w = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(cubic.oracle.z(0.25, w), 3 * w**2 + 4.5)


def test_quad_exp_zero_terminal():
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    spec = fl.preset("ex_quad_exp", g=zero, g1=zero, g2=zero)
    w = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(spec.oracle.y(0.3, w), 0.0, atol=1e-14)
    np.testing.assert_allclose(spec.oracle.z(0.3, w), 0.0, atol=1e-14)


@pytest.mark.parametrize("name", ["ex_counter", "ex_cubic"])
def test_bsde_identity_euler_rate(name):
    # |Y*(t) - g(X_T) - int h + int Z* dW| must shrink at the Euler rate
    spec = fl.preset(name)
    rng = np.random.default_rng(42)

    def residual(n_steps):
        dt = spec.T / n_steps
        dW = rng.standard_normal((256, n_steps)) * math.sqrt(dt)
        W = np.concatenate([np.zeros((256, 1)), np.cumsum(dW, axis=1)], axis=1)
        tg = np.linspace(0, spec.T, n_steps + 1)
        Y = spec.oracle.y(tg[None, :], W)
        Z = spec.oracle.z(tg[None, :], W)
        h = spec.h(tg[None, :-1], W[:, :-1], Y[:, :-1], Z[:, :-1])
        # integrated form from t = 0
        res = Y[:, 0] - Y[:, -1] - np.sum(h * dt, axis=1) + np.sum(Z[:, :-1] * dW, axis=1)
        return float(np.mean(np.abs(res)))

    # the Ito-integral discretization error scales like sqrt(dt)
    coarse, fine = residual(32), residual(256)
    assert fine < 0.6 * coarse
    assert fine < 0.2


def test_fd_partials_match_supplied(cubic):
    # drop the supplied partials and compare the central-difference fallback
    bare = fl.ModelSpec(b=cubic.b, sigma=cubic.sigma, g=cubic.g, h=cubic.h,
                        T=cubic.T, X0=cubic.X0)
    x = np.linspace(-3, 3, 31)
    np.testing.assert_allclose(bare.d("g1")(x), cubic.d("g1")(x), atol=1e-7)
    np.testing.assert_allclose(bare.d("g2")(x), cubic.d("g2")(x), atol=1e-4)
    np.testing.assert_allclose(bare.d("h_x")(0.3, x, 0.0, 0.0),
                               np.full_like(x, 3.0), atol=1e-8)
    np.testing.assert_allclose(bare.d("h_xx")(0.3, x, 0.0, 0.0), 0.0, atol=1e-5)


def test_fd_second_order_accuracy():
    # halving the step shrinks the central-difference error ~4x on a smooth map
    g = lambda x: np.sin(1.3 * np.asarray(x, dtype=float))
    errs = []
    for step in (1e-2, 5e-3):
        spec = make_spec(g=g)
        object.__setattr__(spec, "fd_step", step)
        x = np.linspace(-1, 1, 41)
        errs.append(float(np.max(np.abs(spec.d("g1")(x) - 1.3 * np.cos(1.3 * x)))))
    assert errs[1] < errs[0] / 3.0


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), c=st.floats(-2, 2))
def test_fd_partials_on_random_cubics(a, b, c):
    g = lambda x: a * np.asarray(x, dtype=float) ** 3 + b * np.asarray(x, dtype=float) ** 2 + c * np.asarray(x, dtype=float)
    spec = make_spec(g=g)
    x = np.linspace(-2, 2, 17)
    exact = 3 * a * x**2 + 2 * b * x + c
    np.testing.assert_allclose(spec.d("g1")(x), exact, atol=5e-7 * (1 + abs(a) + abs(b)))


def test_validate_assumptions_counter(counter):
    rep = fl.validate_assumptions(counter)
    assert rep.holds("X") and rep.holds("L") and rep.holds("D1") and rep.holds("D2")
    assert rep.holds("M")
    assert rep["L"].details["k_x_hat"] == pytest.approx(2.0, abs=1e-6)
    assert rep["L"].details["k_y_hat"] == 0.0
    assert rep["L"].details["k_z_hat"] == 0.0
    # (C+) fails: h_x = t - 2 < 0 somewhere
    assert not rep.holds("C+")
    assert rep["C+"].violated_at


def test_validate_assumptions_quad(quad_exp):
    rep = fl.validate_assumptions(quad_exp)
    assert rep.holds("Q")
    assert rep["Q"].details["K_hat"] <= 0.5 + 1e-9
    assert rep.holds("Ctilde+")


def test_validate_assumptions_degenerate_sigma():
    spec = make_spec(sigma="zero")
    rep = fl.validate_assumptions(spec)
    assert not rep.holds("X")
    assert rep["X"].violated_at  # ellipticity witness


def test_validate_assumptions_nan_witness():
    bad_g = lambda x: np.where(np.abs(np.asarray(x, dtype=float)) > 3.0, np.nan, x)

    def bad_h(t, x, y, z):
        return np.where(np.abs(np.asarray(x, dtype=float)) > 3.0, np.nan, 0.0 * np.asarray(x, dtype=float))

    spec = make_spec(h=bad_h)
    with pytest.raises(EvaluationError) as exc:
        fl.validate_assumptions(spec)
    assert exc.value.witness is not None


def test_violated_verdict_requires_witness():
    with pytest.raises(ValueError):
        AssumptionVerdict("X", False, -1.0, [])


def test_markovian_gap_detected():
    # f inconsistent with the simulated forward process must fail (M)
    spec = make_spec(f=lambda t, w: 2.0 * np.asarray(w, dtype=float))
    rep = fl.validate_assumptions(spec)
    assert not rep.holds("M")


def test_grid_box_resolution():
    box = GridBox(0, 1, -2, 2, nt=11, nx=21)
    res = box.resolution()
    assert res["dt"] == pytest.approx(0.1)
    assert res["dx"] == pytest.approx(0.2)


def test_default_box_spans_six_sigmas(counter):
    box = default_box(counter)
    assert box.x_hi == pytest.approx(6.0)
    assert box.x_lo == pytest.approx(-6.0)
