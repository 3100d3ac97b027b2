"""Noisy particle flows ``dX = u dt + sqrt(2 nu) dW`` started from the grid nodes.

A flow is stored through its forward displacement ``lam = X - I`` and, after
inversion, the back-to-labels displacement ``ell = A - I``. Both are
periodic, so only periodic quantities are ever interpolated.

Array layout: ``lam``/``ell`` are ``(m, d, *grid.shape)`` for a block of
``m`` realizations; gradients are ``(m, d, d, *grid.shape)`` with
``grad[:, i, j] = d_j (X_i)``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from stochlag import _kernels
from stochlag.fields import (
    Field,
    FieldError,
    PeriodicGrid,
    gradient_hat,
    spline_coefficients,
)
from stochlag.norms import HolderParams, holder_norm

log = logging.getLogger(__name__)

INVERSION_TOL = 1e-10
MAX_INVERSION_ITERS = 100
OVERSHOOT_CELLS = 8


class FlowError(RuntimeError):
    """Trajectory integration failed (overshoot guard, non-finite values)."""


class InversionError(RuntimeError):
    """The forward map could not be inverted on the grid."""


@dataclass(frozen=True)
class WienerDriver:
    """Reproducible Wiener increments for ``M`` realizations.

    The increment of realization ``r`` at step ``s`` depends only on
    ``(seed, window, s, r)``: each step draws an ``(M, d)`` block from a
    Philox stream whose counter is positioned by the step index.
    """

    seed: int
    M: int
    d: int
    window: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ensemble size M must be >= 1")

    def for_window(self, window: int) -> "WienerDriver":
        return replace(self, window=window)

    def _key(self) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.window])
        return ss.generate_state(2, dtype=np.uint64)

    def normals(self, step: int) -> np.ndarray:
        bitgen = np.random.Philox(key=self._key(), counter=np.array([0, 0, step, 0], np.uint64))
        return np.random.Generator(bitgen).standard_normal((self.M, self.d))

    def increments(self, step: int, dt: float, rows: slice = slice(None)) -> np.ndarray:
        dw = self.normals(step)[rows] * np.sqrt(dt)
        if not np.all(np.isfinite(dw)):
            raise FlowError(f"non-finite Wiener increment at step {step}")
        return dw

    def checksum(self, n_steps: int) -> str:
        digest = hashlib.sha256()
        for s in range(n_steps):
            digest.update(self.normals(s).tobytes())
        return digest.hexdigest()[:16]


class VelocitySchedule:
    """A velocity field known at sample times, linear in time in between.

    Outside the sampled interval the nearest sample is used.
    """

    def __init__(self, grid: PeriodicGrid, times, values):
        values = np.asarray(values, dtype=float)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if values.shape != (len(times), grid.d) + grid.shape:
            raise FieldError(f"schedule values have shape {values.shape}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be increasing")
        self.grid = grid
        self.times = times
        self.values = values
        self._coef = {}
        self._gcoef = {}

    @classmethod
    def steady(cls, u: Field) -> "VelocitySchedule":
        return cls(u.grid, [0.0], u.values[None])

    @classmethod
    def from_fields(cls, times, fields) -> "VelocitySchedule":
        return cls(fields[0].grid, times, np.stack([f.values for f in fields]))

    def _bracket(self, t: float):
        ts = self.times
        if t <= ts[0] or len(ts) == 1:
            return 0, 0, 0.0
        if t >= ts[-1]:
            n = len(ts) - 1
            return n, n, 0.0
        i = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        if w < 1e-12:
            return i, i, 0.0
        return i, i + 1, w

    def at(self, t: float) -> np.ndarray:
        i, j, w = self._bracket(t)
        if w == 0.0:
            return self.values[i]
        return (1 - w) * self.values[i] + w * self.values[j]

    def field(self, t: float) -> Field:
        return Field(self.grid, self.at(t))

    def _coefficients(self, i):
        if i not in self._coef:
            g = self.grid
            hat = g.fft(self.values[i])
            self._coef[i] = spline_coefficients(g, self.values[i])
            grad = g.ifft(gradient_hat(g, hat))  # (d, d, ...): grad[i, j] = d_j u_i
            self._gcoef[i] = spline_coefficients(g, grad).reshape((g.d * g.d,) + g.shape)
        return self._coef[i], self._gcoef[i]

    def coefficients(self, t: float):
        """Spline coefficients of ``u(t)`` and of its gradient, each with a leading batch axis of 1."""
        i, j, w = self._bracket(t)
        ci, gi = self._coefficients(i)
        if w != 0.0:
            cj, gj = self._coefficients(j)
            ci = (1 - w) * ci + w * cj
            gi = (1 - w) * gi + w * gj
        return ci[None], gi[None]

    def sup_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values**2, axis=1)).max())


@dataclass
class FlowState:
    """Displacements of a block of realizations ``rows`` at time ``t``."""

    grid: PeriodicGrid
    t: float
    nu: float
    lam: np.ndarray
    grad_x: np.ndarray | None = None
    ell: np.ndarray | None = None
    grad_a: np.ndarray | None = None
    rows: tuple = (0, 0)
    inversion_residual: float = np.nan
    inversion_iters: int = 0
    info: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.lam.shape[0]

    def copy(self) -> "FlowState":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return replace(self, lam=self.lam.copy(), grad_x=cp(self.grad_x), ell=cp(self.ell),
                       grad_a=cp(self.grad_a), info=dict(self.info))


def _eval(grid: PeriodicGrid, coef: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Evaluate batched coefficients at ``I + disp``; returns ``(m, C, *grid.shape)``."""
    coef = np.ascontiguousarray(coef, dtype=float)
    disp = np.ascontiguousarray(disp, dtype=float)
    if coef.shape[0] not in (1, disp.shape[0]):
        raise FieldError("coefficient batch does not match displacement batch")
    out = np.empty((disp.shape[0], coef.shape[1]) + grid.shape)
    kernel = _kernels.spline_disp_2d if grid.d == 2 else _kernels.spline_disp_3d
    kernel(coef, disp, 1.0 / grid.h, out)
    return out


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nodewise product of ``(m, d, d, ...)`` matrix fields."""
    d = a.shape[1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    for i in range(d):
        for k in range(d):
            acc = a[:, i, 0] * b[:, 0, k]
            for j in range(1, d):
                acc += a[:, i, j] * b[:, j, k]
            out[:, i, k] = acc
    return out


def identity_gradient(grid: PeriodicGrid, m: int) -> np.ndarray:
    eye = np.eye(grid.d).reshape((1, grid.d, grid.d) + (1,) * grid.d)
    return np.broadcast_to(eye, (m, grid.d, grid.d) + grid.shape).copy()


def spectral_gradient(grid: PeriodicGrid, disp: np.ndarray) -> np.ndarray:
    """``I + grad(disp)`` from spectral differentiation of the displacement."""
    return grid.ifft(gradient_hat(grid, grid.fft(disp))) + identity_gradient(grid, disp.shape[0])


def _n_steps(t0: float, t_end: float, dt: float) -> int:
    n = int(round((t_end - t0) / dt))
    if n < 0 or abs(n * dt - (t_end - t0)) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError(f"dt={dt} does not divide the interval [{t0}, {t_end}]")
    return n


def flow_steps(u: VelocitySchedule | Field, nu: float, driver: WienerDriver, dt: float,
               t_end: float, *, t0: float = 0.0, rows: tuple | None = None,
               scheme: str = "euler", gradient: str | None = "variational",
               step_offset: int = 0):
    """Generator form of :func:`integrate_flow`; yields the state after every step.

    The initial (identity) state is yielded first. Wiener increments are
    indexed by ``step_offset + j`` for the ``j``-th step.
    """
    if isinstance(u, Field):
        u = VelocitySchedule.steady(u)
    grid = u.grid
    if nu < 0:
        raise ValueError("viscosity must be nonnegative")
    if scheme not in ("euler", "heun"):
        raise ValueError(f"unknown time scheme {scheme!r}")
    if gradient not in (None, "variational", "spectral"):
        raise ValueError(f"unknown gradient mode {gradient!r}")
    n = _n_steps(t0, t_end, dt)
    start, stop = rows if rows is not None else (0, driver.M)
    m = stop - start
    umax = u.sup_norm()
    if umax * dt > OVERSHOOT_CELLS * grid.h:
        raise FlowError(
            f"trajectory overshoot guard: |u|_inf*dt = {umax * dt:.3g} > {OVERSHOOT_CELLS}h"
        )
    sigma = np.sqrt(2.0 * nu)
    state = FlowState(grid=grid, t=t0, nu=nu, lam=np.zeros((m, grid.d) + grid.shape),
                      rows=(start, stop))
    if gradient == "variational":
        state.grad_x = identity_gradient(grid, m)
    elif gradient == "spectral":
        state.grad_x = identity_gradient(grid, m)
    yield state
    bshape = (m, grid.d) + (1,) * grid.d
    dd = (grid.d, grid.d)
    for j in range(n):
        t = t0 + j * dt
        cu, cg = u.coefficients(t)
        vel = _eval(grid, cu, state.lam)
        noise = 0.0
        if nu > 0:
            noise = sigma * driver.increments(step_offset + j, dt, slice(start, stop)).reshape(bshape)
        if gradient == "variational":
            gmat = _eval(grid, cg, state.lam).reshape((m,) + dd + grid.shape)
            rate = _matmul(gmat, state.grad_x)
        if scheme == "euler":
            state.lam = state.lam + dt * vel + noise
            if gradient == "variational":
                state.grad_x = state.grad_x + dt * rate
        else:
            pred = state.lam + dt * vel + noise
            cu2, cg2 = u.coefficients(t + dt)
            vel2 = _eval(grid, cu2, pred)
            if gradient == "variational":
                gpred = state.grad_x + dt * rate
                g2 = _eval(grid, cg2, pred).reshape((m,) + dd + grid.shape)
                state.grad_x = state.grad_x + 0.5 * dt * (rate + _matmul(g2, gpred))
            state.lam = state.lam + 0.5 * dt * (vel + vel2) + noise
        if gradient == "spectral":
            state.grad_x = spectral_gradient(grid, state.lam)
        if not np.all(np.isfinite(state.lam)):
            raise FlowError(f"non-finite displacement at step {j}")
        state.t = t + dt
        state.ell = state.grad_a = None
        yield state


def integrate_flow(u: VelocitySchedule | Field, nu: float, driver: WienerDriver, dt: float,
                   t_end: float, **kwargs) -> FlowState:
    """Euler-Maruyama (or Heun) integration of the flow from the identity map.

    Labels are the grid nodes. ``grad_x`` follows the variational recursion
    ``grad_x <- grad_x + dt (grad u)(X) grad_x`` unless ``gradient`` selects
    the spectral cross-check or ``None``.
    """
    state = None
    for state in flow_steps(u, nu, driver, dt, t_end, **kwargs):
        pass
    return state


def c0_norm(tensor: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Per-realization sup over nodes of the Frobenius magnitude of ``(m, d, d, ...)`` data."""
    m = tensor.shape[0]
    return np.sqrt(np.sum(tensor.reshape(m, grid.d * grid.d, -1) ** 2, axis=1)).max(axis=1)


def grad_lambda(state: FlowState) -> np.ndarray:
    if state.grad_x is not None:
        return state.grad_x - identity_gradient(state.grid, state.m)
    return spectral_gradient(state.grid, state.lam) - identity_gradient(state.grid, state.m)


def _inverse_matrices(mats: np.ndarray, d: int) -> np.ndarray:
    """Invert ``(m, d, d, ...)`` matrix fields node by node (closed form, d = 2 or 3)."""
    a = mats
    out = np.empty_like(a)
    if d == 2:
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
        out[:, 0, 0] = a[:, 1, 1] / det
        out[:, 0, 1] = -a[:, 0, 1] / det
        out[:, 1, 0] = -a[:, 1, 0] / det
        out[:, 1, 1] = a[:, 0, 0] / det
        return out
    cof = np.empty_like(a)
    for i in range(3):
        for j in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            cof[:, i, j] = a[:, i1, j1] * a[:, i2, j2] - a[:, i1, j2] * a[:, i2, j1]
    det = a[:, 0, 0] * cof[:, 0, 0] + a[:, 0, 1] * cof[:, 0, 1] + a[:, 0, 2] * cof[:, 0, 2]
    for i in range(3):
        for j in range(3):
            out[:, i, j] = cof[:, j, i] / det
    return out


def _matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = v.shape[1]
    return np.stack([sum(a[:, i, j] * v[:, j] for j in range(d)) for i in range(d)], axis=1)


def invert_flow(state: FlowState, tol: float = INVERSION_TOL,
                max_iter: int = MAX_INVERSION_ITERS, newton: bool = False,
                with_gradient: bool = True) -> FlowState:
    """Fill ``ell = A - I`` and ``grad_a`` by solving ``ell(x) = -lam(x + ell(x))``.

    The state is updated in place and returned. Damped fixed-point
    iteration (damping 0.8 once ``|grad lam|`` reaches 0.5) until
    ``|X(A(x)) - x|_inf <= tol * L``; ``newton=True`` switches to Newton
    steps with the interpolated ``grad lam``. ``grad_a`` is ``(grad X)^{-1}``
    evaluated at ``A`` (skipped with ``with_gradient=False``).
    """
    grid = state.grid
    d = grid.d
    lam_hat = grid.fft(state.lam)
    if state.grad_x is not None:
        glam = grad_lambda(state)
    else:
        glam = grid.ifft(gradient_hat(grid, lam_hat))
    rho = float(c0_norm(glam, grid).max()) if state.m else 0.0
    if rho >= 1.0:
        raise InversionError(
            f"contraction condition violated: |grad lambda|_C0 = {rho:.3f} >= 1; "
            "shorten the window (UT/L < delta)"
        )
    omega = 0.8 if rho >= 0.5 else 1.0
    coef = grid.ifft(lam_hat / grid._spline_symbol)
    gcoef = None
    if newton or with_gradient:
        gcoef = spline_coefficients(grid, glam).reshape((state.m, d * d) + grid.shape)
    eye = identity_gradient(grid, state.m)
    ell = -state.lam.copy()
    target = tol * grid.L
    resid = np.inf
    if newton:
        both = np.concatenate([coef, gcoef], axis=1)
    for it in range(1, max_iter + 1):
        if newton:
            ev = _eval(grid, both, ell)
            r = ell + ev[:, :d]
        else:
            r = ell + _eval(grid, coef, ell)
        resid = float(np.abs(r).max()) if r.size else 0.0
        if resid <= target:
            break
        if newton:
            jac = ev[:, d:].reshape(glam.shape) + eye
            ell -= _matvec(_inverse_matrices(jac, d), r)
        else:
            ell -= omega * r
    else:
        raise InversionError(f"inverse map did not converge in {max_iter} iterations "
                             f"(residual {resid:.3g})")
    state.ell = ell
    state.inversion_residual = resid
    state.inversion_iters = it
    if with_gradient:
        gx_at_a = _eval(grid, gcoef, ell).reshape(glam.shape) + eye
        state.grad_a = _inverse_matrices(gx_at_a, d)
    return state


def compose(f: Field, displacement: Field | np.ndarray, scheme: str = "spline") -> Field:
    """``f(x + displacement(x))`` sampled on the grid."""
    from stochlag.fields import interpolate

    grid = f.grid
    disp = displacement.values if isinstance(displacement, Field) else np.asarray(displacement)
    pts = np.moveaxis(disp, 0, -1) + np.stack(grid.coords, axis=-1)
    return Field(grid, interpolate(f, pts, scheme=scheme))


def compose_ensemble(grid: PeriodicGrid, values: np.ndarray, ell: np.ndarray) -> np.ndarray:
    """Evaluate grid data ``values`` (``(C, *grid)`` shared, or ``(m, C, *grid)``) at ``I + ell``."""
    coef = spline_coefficients(grid, values)
    if coef.ndim == grid.d + 1:
        coef = coef[None]
    return _eval(grid, coef, ell)


def jacobian_deviation(state: FlowState) -> float:
    """``max |det grad X - 1|`` over realizations and nodes."""
    gx = np.moveaxis(state.grad_x.reshape(state.m, state.grid.d, state.grid.d, -1), 3, 1)
    return float(np.abs(np.linalg.det(gx) - 1.0).max())


@dataclass
class DisplacementReport:
    t: float
    U: float
    L: float
    grad_lambda_c0: np.ndarray
    grad_lambda_holder: np.ndarray
    grad_ell_holder: np.ndarray
    gronwall_ratio: np.ndarray
    linear_ratio: np.ndarray
    inverse_linear_ratio: np.ndarray


def _safe_ratio(num, den):
    num = np.asarray(num, float)
    if den == 0:
        return np.where(num == 0, 0.0, np.inf)
    return num / den


def displacement_diagnostics(state: FlowState, U: float, L: float | None = None,
                             params: HolderParams | None = None,
                             max_realizations: int | None = None) -> DisplacementReport:
    """Per-realization displacement-gradient norms against the Gronwall and linear-in-t bounds.

    ``params.k`` is the Hölder order applied to ``grad lam`` and ``grad ell``.
    """
    grid = state.grid
    L = grid.L if L is None else L
    params = params or HolderParams()
    glam = grad_lambda(state)
    c0 = c0_norm(glam, grid)
    count = state.m if max_realizations is None else min(state.m, max_realizations)
    hl = np.array([holder_norm(Field(grid, glam[r]), params).full for r in range(count)])
    if state.ell is not None:
        gell = spectral_gradient(grid, state.ell) - identity_gradient(grid, state.m)
        he = np.array([holder_norm(Field(grid, gell[r]), params).full for r in range(count)])
    else:
        he = np.full(count, np.nan)
    x = U * state.t / L
    return DisplacementReport(
        t=state.t,
        U=U,
        L=L,
        grad_lambda_c0=c0,
        grad_lambda_holder=hl,
        grad_ell_holder=he,
        gronwall_ratio=_safe_ratio(c0, np.expm1(x)),
        linear_ratio=_safe_ratio(hl, x),
        inverse_linear_ratio=_safe_ratio(he, x),
    )


def gronwall_bound(U: float, t: float, L: float, dt: float) -> float:
    """``(exp(Ut/L) - 1)(1 + 5 dt U / L)``: the time-discrete Gronwall envelope for ``|grad lam|_C0``."""
    return float(np.expm1(U * t / L) * (1.0 + 5.0 * dt * U / L))


class EnsembleAccumulator:
    """Mean and standard error over realizations, combined in a fixed order.

    Blocks are merged pairwise (Chan's update) in block order, so the result
    depends only on the block partition, never on which worker produced a
    block.
    """

    def __init__(self):
        self._blocks = []

    def add(self, samples: np.ndarray):
        """Add a block of samples with the realization axis first."""
        n = samples.shape[0]
        if n == 0:
            return
        mean = samples.mean(axis=0)
        m2 = ((samples - mean) ** 2).sum(axis=0)
        self._blocks.append((n, mean, m2))

    @staticmethod
    def _merge(a, b):
        na, ma, sa = a
        nb, mb, sb = b
        n = na + nb
        delta = mb - ma
        return n, ma + delta * (nb / n), sa + sb + delta**2 * (na * nb / n)

    def _reduce(self):
        blocks = list(self._blocks)
        if not blocks:
            raise ValueError("no samples accumulated")
        while len(blocks) > 1:
            merged = [self._merge(blocks[i], blocks[i + 1]) for i in range(0, len(blocks) - 1, 2)]
            if len(blocks) % 2:
                merged.append(blocks[-1])
            blocks = merged
        return blocks[0]

    @property
    def count(self) -> int:
        return sum(b[0] for b in self._blocks)

    def mean(self) -> np.ndarray:
        return self._reduce()[1]

    def stderr(self) -> np.ndarray:
        n, _, m2 = self._reduce()
        if n < 2:
            return np.full_like(m2, np.nan)
        return np.sqrt(m2 / (n - 1) / n)


def blocks(M: int, block_size: int):
    """Fixed partition of ``range(M)`` into consecutive ``(start, stop)`` blocks."""
    block_size = max(1, int(block_size))
    return [(s, min(s + block_size, M)) for s in range(0, M, block_size)]
