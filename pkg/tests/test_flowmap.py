import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from stochlag.fields import Field, PeriodicGrid, interpolate, random_smooth
from stochlag.flowmap import (
    EnsembleAccumulator, FlowState, InversionError, VelocitySchedule, WienerDriver, blocks,
    c0_norm, compose, displacement_diagnostics, grad_lambda, gronwall_bound, integrate_flow,
    invert_flow, jacobian_deviation,
)
from stochlag.initial import taylor_green

G = PeriodicGrid(2, 16)


def const_field(g, c):
    return Field(g, np.stack([np.full(g.shape, ci) for ci in c]))


def test_zero_drift_no_noise_is_identity():
    st_ = integrate_flow(const_field(G, [0, 0]), 0.0, WienerDriver(1, 3, 2), 0.1, 0.5)
    assert np.abs(st_.lam).max() == 0.0
    assert np.array_equal(st_.grad_x, np.broadcast_to(np.eye(2)[None, :, :, None, None],
                                                      st_.grad_x.shape))


def test_zero_drift_noise_is_rigid_brownian_shift():
    drv = WienerDriver(5, 4, 2)
    nu, dt, n = 0.3, 0.05, 6
    s = integrate_flow(const_field(G, [0, 0]), nu, drv, dt, n * dt)
    w = sum(drv.increments(j, dt) for j in range(n))
    expected = np.sqrt(2 * nu) * w
    assert np.allclose(s.lam, expected[:, :, None, None], atol=1e-13, rtol=0)
    assert np.abs(grad_lambda(s)).max() == 0.0


@pytest.mark.parametrize("scheme", ["euler", "heun"])
def test_constant_drift_translation(scheme):
    c = [0.3, -0.7]
    s = integrate_flow(const_field(G, c), 0.0, WienerDriver(0, 2, 2), 0.1, 1.0, scheme=scheme)
    assert np.allclose(s.lam, np.array(c)[None, :, None, None], atol=1e-12, rtol=0)


def test_wiener_driver_reproducible_and_row_consistent():
    a, b = WienerDriver(7, 10, 3), WienerDriver(7, 10, 3)
    assert np.array_equal(a.increments(4, 0.1), b.increments(4, 0.1))
    assert np.array_equal(a.increments(4, 0.1, slice(3, 7)), a.increments(4, 0.1)[3:7])
    assert not np.array_equal(a.normals(0), a.for_window(1).normals(0))
    assert not np.array_equal(a.normals(0), a.normals(1))
    assert a.checksum(3) == b.checksum(3) != a.for_window(2).checksum(3)
    with pytest.raises(ValueError):
        WienerDriver(0, 0, 2)


def _state(g, lam):
    return FlowState(grid=g, t=0.0, nu=0.0, lam=np.asarray(lam, float))


def test_invert_identity_and_translation():
    s = invert_flow(_state(G, np.zeros((1, 2) + G.shape)))
    assert np.abs(s.ell).max() == 0.0
    assert np.allclose(s.grad_a, np.eye(2)[None, :, :, None, None], atol=1e-14)
    c = np.array([0.4, -1.1])
    s = invert_flow(_state(G, np.broadcast_to(c[None, :, None, None], (1, 2) + G.shape)))
    assert np.allclose(s.ell, -c[None, :, None, None], atol=1e-13, rtol=0)
    assert np.allclose(s.grad_a, np.eye(2)[None, :, :, None, None], atol=1e-12)


@pytest.mark.parametrize("newton", [False, True])
def test_invert_matches_bisection(newton):
    g = PeriodicGrid(2, 32)
    eps = 0.3 * g.L / (2 * np.pi)  # |d lam/dx| = 0.3 < 1
    k = 2 * np.pi / g.L
    lam = np.zeros((1, 2) + g.shape)
    lam[0, 0] = eps * np.sin(k * g.coords[0])
    s = invert_flow(_state(g, lam), newton=newton)
    x = g.coords[0][:, 0]
    lam_f = Field(g, lam[0])

    def X(a):  # the flow map as the solver represents it: identity plus spline-interpolated lam
        return a + interpolate(lam_f, np.array([[a, 0.0]]), "spline")[0, 0]

    a = np.array([brentq(lambda a: X(a) - xi, xi - g.L / 2, xi + g.L / 2, xtol=1e-14)
                  for xi in x])
    assert np.abs(s.ell[0, 0, :, 0] - (a - x)).max() < 1e-9
    assert np.abs(s.ell[0, 1]).max() == 0.0
    assert s.inversion_residual <= 1e-10 * g.L


def test_invert_rejects_non_contracting_map():
    g = PeriodicGrid(2, 32)
    lam = np.zeros((1, 2) + g.shape)
    lam[0, 0] = 1.5 * g.L / (2 * np.pi) * np.sin(2 * np.pi * g.coords[0] / g.L)
    with pytest.raises(InversionError, match="shorten the window"):
        invert_flow(_state(g, lam))


@given(st.integers(0, 2**31), st.floats(0.05, 0.4))
def test_inverse_composes_to_identity(seed, amp):
    g = PeriodicGrid(2, 32)
    lam = random_smooth(g, np.random.default_rng(seed), rank=1, kmax=2).values
    gl = c0_norm(grad_lambda(_state(g, lam[None])), g)[0]
    lam = lam * (amp / gl)
    s = invert_flow(_state(g, lam[None]))
    assert s.inversion_residual <= 1e-10 * g.L
    # A o X = I up to the interpolation error of ell off the grid
    back = compose(Field(g, s.ell[0]), Field(g, lam))
    assert np.abs(back.values + lam).max() < 1e-4 * g.L


def test_compose_examples():
    g = PeriodicGrid(2, 32)
    f = Field(g, np.sin(2 * np.pi * g.coords[0] / g.L))
    assert np.abs(compose(f, np.zeros((2,) + g.shape)).values - f.values).max() < 1e-14
    shift = np.zeros((2,) + g.shape)
    shift[0] = g.L / 4
    shifted = compose(f, shift)
    assert np.abs(shifted.values - np.cos(2 * np.pi * g.coords[0] / g.L)).max() < 1e-3
    assert np.abs(compose(f, shift, "trig").values
                  - np.cos(2 * np.pi * g.coords[0] / g.L)).max() < 1e-12


def test_compose_refinement_order(rng):
    errs = []
    for N in (16, 32, 64):
        g = PeriodicGrid(2, N)
        x, y = g.coords
        f = Field(g, np.sin(x + np.cos(y)))
        disp = np.stack([0.3 * np.sin(y), 0.2 * np.cos(x)])
        exact = np.sin(x + disp[0] + np.cos(y + disp[1]))
        errs.append(np.abs(compose(f, disp).values - exact).max())
    assert errs[1] / errs[2] > 8 and errs[0] / errs[1] > 8


def test_diagnostics_zero_drift():
    s = integrate_flow(const_field(G, [0, 0]), 0.0, WienerDriver(0, 2, 2), 0.1, 0.2)
    invert_flow(s)
    r = displacement_diagnostics(s, U=1.0)
    assert np.all(r.grad_lambda_c0 == 0) and np.all(r.gronwall_ratio == 0)
    assert np.all(r.grad_lambda_holder == 0) and np.all(r.grad_ell_holder == 0)


def test_taylor_green_gronwall_ratio():
    g = PeriodicGrid(2, 32)
    u = taylor_green(g)
    U = np.sqrt(2.0) * g.L  # L sup |grad u| (Frobenius)
    dt = 0.01
    s = integrate_flow(u, 0.1, WienerDriver(3, 16, 2), dt, 0.1)
    r = displacement_diagnostics(s, U=U)
    assert r.gronwall_ratio.max() <= 1.02
    assert c0_norm(grad_lambda(s), g).max() <= gronwall_bound(U, s.t, g.L, dt)


def test_inverse_lipschitz_constant_stable_under_refinement():
    ratios = []
    for N in (16, 32):
        g = PeriodicGrid(2, N)
        u = taylor_green(g, 0.5)
        v = Field(g, u.values * 1.05)
        drv = WienerDriver(9, 4, 2)
        s1 = invert_flow(integrate_flow(u, 0.05, drv, 0.02, 0.4))
        s2 = invert_flow(integrate_flow(v, 0.05, drv, 0.02, 0.4))
        ratios.append(np.abs(s1.ell - s2.ell).max() / np.abs(s1.lam - s2.lam).max())
    assert 0.5 < ratios[0] < 2.0
    assert abs(ratios[1] / ratios[0] - 1) < 0.1


def test_jacobian_incompressible_at_zero_viscosity():
    g = PeriodicGrid(2, 32)
    dev = []
    for dt in (0.02, 0.01):
        s = integrate_flow(taylor_green(g), 0.0, WienerDriver(0, 1, 2), dt, 0.2, scheme="heun")
        dev.append(jacobian_deviation(s))
    assert dev[0] < 1e-3 and dev[1] < dev[0]


def test_velocity_schedule_interpolates_linearly():
    g = PeriodicGrid(2, 16)
    a = const_field(g, [1.0, 0.0])
    b = const_field(g, [3.0, 2.0])
    sch = VelocitySchedule.from_fields([0.0, 1.0], [a, b])
    assert np.allclose(sch.at(0.25)[:, 0, 0], [1.5, 0.5])
    assert np.array_equal(sch.at(-1.0), a.values) and np.array_equal(sch.at(2.0), b.values)
    with pytest.raises(ValueError):
        VelocitySchedule.from_fields([1.0, 0.0], [a, b])


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**31))
def test_accumulator_matches_numpy_and_is_partition_independent(M, bs, seed):
    x = np.random.default_rng(seed).normal(size=(M, 3))
    acc = EnsembleAccumulator()
    for a, b in blocks(M, bs):
        acc.add(x[a:b])
    assert acc.count == M
    assert np.allclose(acc.mean(), x.mean(axis=0), rtol=1e-12, atol=1e-12)
    if M > 1:
        assert np.allclose(acc.stderr(), x.std(axis=0, ddof=1) / np.sqrt(M), rtol=1e-10)
    else:
        assert np.isnan(acc.stderr()).all()
