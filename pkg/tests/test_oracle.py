import numpy as np
import pytest

from conftest import rel
from stochlag.fields import Field, PeriodicGrid, random_solenoidal
from stochlag.initial import cellular_flow, cosine_mode, gaussian_bump, taylor_green
from stochlag.oracle import (
    CFLError, OracleConfig, advect_diffuse, dissipation, heat_semigroup, nse_step,
)

G = PeriodicGrid(2, 32)


def zero_velocity(g):
    return Field(g, np.zeros((g.d,) + g.shape))


@pytest.mark.parametrize("order", [2, 4])
def test_pure_diffusion_single_mode_exact(order):
    theta = cosine_mode(G, axis=1, mode=2)
    nu, t = 0.3, 0.7
    out = advect_diffuse(theta, zero_velocity(G), nu, OracleConfig(dt=0.05, order=order), [t])[0]
    k2 = (2 * np.pi * 2 / G.L) ** 2
    assert rel(out.values, np.exp(-nu * k2 * t) * theta.values) < 1e-10
    assert rel(heat_semigroup(theta, nu, t).values, out.values) < 1e-10


def test_shear_transport_conserves_l2():
    u = Field(G, np.stack([np.sin(2 * np.pi * G.coords[1] / G.L), np.zeros(G.shape)]))
    theta = gaussian_bump(G, [G.L / 2, G.L / 3], G.L / 8)
    out = advect_diffuse(theta, u, 0.0, OracleConfig(dt=0.01), [1.0])[0]
    assert abs(out.norm_l2() / theta.norm_l2() - 1) < 1e-8


@pytest.mark.parametrize("order", [2, 4])
def test_self_convergence_order(order):
    theta = cosine_mode(G)
    u = cellular_flow(G)
    run = lambda dt: advect_diffuse(theta, u, 0.05, OracleConfig(dt=dt, order=order), [0.5])[0]
    a, b, c = (run(dt).values for dt in (0.05, 0.025, 0.0125))
    richardson = c + (c - b) / (2**order - 1)
    rate = np.log2(np.linalg.norm(a - richardson) / np.linalg.norm(b - richardson))
    assert abs(rate - order) < 0.5, rate


def test_taylor_green_nse_exact():
    u0 = taylor_green(G)
    nu = 0.1
    out = nse_step(u0, nu, OracleConfig(dt=0.01), [1.0])[0]
    assert rel(out.values, np.exp(-2 * nu) * u0.values) < 1e-6


def test_zero_initial_data_stays_zero():
    out = nse_step(zero_velocity(G), 0.2, OracleConfig(), [0.3])[0]
    assert np.abs(out.values).max() == 0.0


def test_nse_energy_identity_per_step():
    g = PeriodicGrid(2, 32)
    u0 = random_solenoidal(g, np.random.default_rng(3), kmax=3)
    u0 = u0 * (1.0 / u0.norm_inf())
    nu, dt = 0.05, 2e-3
    energy, diss = [u0.norm_l2() ** 2], [dissipation(u0)]

    def on_step(t, u):
        energy.append(u.norm_l2() ** 2)
        diss.append(dissipation(u))

    nse_step(u0, nu, OracleConfig(dt=dt), [0.2], on_step=on_step)
    e, dd = np.array(energy), np.array(diss)
    lhs = np.diff(e)
    rhs = -2 * nu * dt * 0.5 * (dd[1:] + dd[:-1])
    assert np.max(np.abs(lhs - rhs) / e[1:]) < 1e-6


def test_cfl_guard():
    with pytest.raises(CFLError):
        advect_diffuse(cosine_mode(G), cellular_flow(G, 50.0), 0.1, OracleConfig(dt=0.1), [0.2])


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(order=3)
    with pytest.raises(ValueError):
        OracleConfig(dt=0)
