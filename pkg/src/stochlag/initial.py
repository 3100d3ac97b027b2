"""Named initial data and drifts used by tests, acceptance runs and the CLI."""

from __future__ import annotations

import numpy as np

from stochlag.fields import Field, PeriodicGrid, random_solenoidal


def taylor_green(grid: PeriodicGrid, amplitude: float = 1.0) -> Field:
    """``(sin x cos y, -cos x sin y)`` in scaled coordinates; zero third component in 3D."""
    x = [2 * np.pi * c / grid.L for c in grid.coords]
    u = np.zeros((grid.d,) + grid.shape)
    u[0] = np.sin(x[0]) * np.cos(x[1])
    u[1] = -np.cos(x[0]) * np.sin(x[1])
    return Field(grid, amplitude * u)


def cellular_flow(grid: PeriodicGrid, amplitude: float = 1.0) -> Field:
    """``grad_perp psi`` with ``psi = sin(2 pi x/L) sin(2 pi y/L) L / (2 pi)``.

    The stream function is scaled so ``|u|_inf = amplitude``.
    """
    if grid.d != 2:
        raise ValueError("the cellular flow is two dimensional")
    x, y = (2 * np.pi * c / grid.L for c in grid.coords)
    u = np.stack([-np.sin(x) * np.cos(y), np.cos(x) * np.sin(y)])
    return Field(grid, amplitude * u)


def cosine_mode(grid: PeriodicGrid, axis: int = 0, mode: int = 1) -> Field:
    return Field(grid, np.cos(2 * np.pi * mode * grid.coords[axis] / grid.L))


def gaussian_bump(grid: PeriodicGrid, center, width: float) -> Field:
    """Periodized Gaussian with its mean removed."""
    r2 = np.zeros(grid.shape)
    for c, x0 in zip(grid.coords, center):
        dx = (c - x0 + grid.L / 2) % grid.L - grid.L / 2
        r2 = r2 + dx**2
    v = np.exp(-r2 / (2 * width**2))
    return Field(grid, v - v.mean())


def random_small(grid: PeriodicGrid, seed: int, amplitude: float, kmax: int = 2) -> Field:
    """Random divergence-free, mean-zero velocity with RMS ``amplitude``."""
    rng = np.random.default_rng(seed)
    v = random_solenoidal(grid, rng, kmax=kmax)
    rms = np.sqrt(np.mean(np.sum(v.values**2, axis=0)))
    return Field(grid, v.values * (amplitude / rms))


NAMED = {
    "taylor-green": taylor_green,
    "cellular": cellular_flow,
}
