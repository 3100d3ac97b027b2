"""Deterministic pseudo-spectral reference solvers.

Both solvers use the integrating-factor RK4 (or RK2) scheme, which treats
diffusion exactly, and a 2/3-rule dealiased nonlinearity. Advection is
written in flux form ``div(u theta)`` so the mean is conserved to
round-off; Navier-Stokes uses the rotational form ``P[u x omega]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stochlag.fields import Field, curl_hat, divergence_hat, leray_hat
from stochlag.flowmap import VelocitySchedule


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    dt: float = 1e-3
    order: int = 4
    cfl: float = 0.5

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ValueError("integrator order must be 2 or 4")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


def _check_cfl(umax, dt, h, limit):
    if umax * dt / h > limit:
        raise CFLError(f"advective CFL {umax * dt / h:.3f} exceeds {limit}")


def _march(rhs, state_hat, decay, t0, sample_times, dt, order, on_step=None):
    """Integrating-factor RK march of ``d/dt s = -decay * s + rhs(s, t)``.

    Returns spectral states at ``sample_times``; steps are shortened so
    every sample time is hit exactly.
    """
    out = []
    t = t0
    s = state_hat
    cache = {}
    for ts in sample_times:
        if ts < t - 1e-12:
            raise ValueError("sample times must be nondecreasing and >= t0")
        n = int(np.ceil((ts - t) / dt - 1e-9))
        step = (ts - t) / n if n else 0.0
        for _ in range(n):
            key = round(step, 15)
            if key not in cache:
                cache[key] = (np.exp(-decay * step), np.exp(-decay * step / 2))
            e, eh = cache[key]
            if order == 4:
                k1 = rhs(s, t)
                k2 = rhs(eh * (s + 0.5 * step * k1), t + step / 2)
                k3 = rhs(eh * s + 0.5 * step * k2, t + step / 2)
                k4 = rhs(e * s + step * eh * k3, t + step)
                s = e * s + step / 6 * (e * k1 + 2 * eh * (k2 + k3) + k4)
            else:
                k1 = rhs(s, t)
                k2 = rhs(e * (s + step * k1), t + step)
                s = e * s + step / 2 * (e * k1 + k2)
            t = t + step
            if on_step is not None:
                on_step(t, s)
        out.append(s)
    return out


def advect_diffuse(theta0: Field, u: VelocitySchedule | Field, nu: float, cfg: OracleConfig,
                   sample_times, t0: float = 0.0, on_step=None) -> list[Field]:
    """Solve ``theta_t + u.grad(theta) = nu lap(theta)`` and sample it."""
    g = theta0.grid
    if isinstance(u, Field):
        u = VelocitySchedule.steady(u)
    _check_cfl(u.sup_norm(), cfg.dt, g.h, cfg.cfl)
    mask = g.dealias_mask

    def rhs(s, t):
        theta = g.ifft(s)
        flux = g.fft(u.at(t) * theta)
        return -(mask * divergence_hat(g, flux))

    hook = None if on_step is None else (lambda t, s: on_step(t, Field(g, g.ifft(s))))
    states = _march(rhs, theta0.hat.copy(), nu * g.k2, t0, sample_times, cfg.dt, cfg.order, hook)
    return [Field(g, g.ifft(s)) for s in states]


def _rotational(g, uhat, mask):
    u = g.ifft(uhat)
    w = g.ifft(curl_hat(g, uhat))
    if g.d == 2:
        cross = np.stack([u[1] * w, -u[0] * w])
    else:
        cross = np.cross(u, w, axis=0)
    nl = leray_hat(g, mask * g.fft(cross))
    nl[(Ellipsis,) + (0,) * g.d] = 0.0
    return nl


def nse_step(u0: Field, nu: float, cfg: OracleConfig, sample_times, t0: float = 0.0,
             on_step=None) -> list[Field]:
    """Incompressible Navier-Stokes ``u_t + (u.grad)u - nu lap u + grad p = 0``."""
    g = u0.grid
    if u0.rank != 1:
        raise ValueError("nse_step needs a vector field")
    _check_cfl(u0.norm_inf(), cfg.dt, g.h, cfg.cfl)
    mask = g.dealias_mask
    limit = cfg.cfl

    def rhs(s, t):
        return _rotational(g, s, mask)

    def hook(t, s):
        u = g.ifft(s)
        _check_cfl(float(np.sqrt((u**2).sum(axis=0)).max()), cfg.dt, g.h, limit)
        if on_step is not None:
            on_step(t, Field(g, u))

    states = _march(rhs, leray_hat(g, u0.hat.copy()), nu * g.k2, t0, sample_times, cfg.dt,
                    cfg.order, hook)
    return [Field(g, g.ifft(s)) for s in states]


def heat_semigroup(f: Field, nu: float, t: float) -> Field:
    """Exact ``exp(t nu lap) f``."""
    g = f.grid
    return Field(g, g.ifft(f.hat * np.exp(-nu * g.k2 * t)))


def dissipation(f: Field) -> float:
    """``|grad f|_2^2`` computed spectrally (Parseval)."""
    g = f.grid
    w = np.full(g.spectral_shape, 2.0)
    w[..., 0] = 1.0
    if g.N % 2 == 0:
        w[..., -1] = 1.0
    power = (np.abs(f.hat) ** 2 * g.k2 * w).sum()
    return float(power * g.cell_volume / g.size)
