"""Stochastic Lagrangian Navier-Stokes solver.

The velocity is defined implicitly by

    dX = u dt + sqrt(2 nu) dW,   A = X^{-1},   u = E P[(grad^T A)(u0 o A)]

and is computed by windowed Picard iteration: on each short window the drift
is frozen at the previous iterate, flows are integrated with the same Wiener
increments, inverted, and the velocity is recovered. Each window restarts
from the previous window's terminal velocity.

The vorticity route ``omega = E[(grad X) omega0] o A`` followed by
Biot-Savart is available as an alternative and as a cross-check. With
``grad A = (grad X)^{-1} o A`` the stretched vorticity is
``(grad A)^{-1} (omega0 o A)``; in two dimensions it reduces to the scalar
transport ``E omega0 o A``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from stochlag.fields import (
    Field,
    FieldError,
    PeriodicGrid,
    biot_savart,
    curl,
    divergence,
    leray_hat,
    write_snapshot,
)
from stochlag.flowmap import (
    EnsembleAccumulator,
    FlowState,
    VelocitySchedule,
    WienerDriver,
    _eval,
    _inverse_matrices,
    blocks,
    flow_steps,
    invert_flow,
    spectral_gradient,
)
from stochlag.io import write_table
from stochlag.norms import HolderParams, holder_norm, velocity_norm

log = logging.getLogger(__name__)

DELTA_NUM = 0.25
MAX_PICARD = 25
MAX_HALVINGS = 4
DIV_TOL = 1e-9
ROUTES = ("projection", "vorticity")


class ConfigError(ValueError):
    """Inconsistent solver configuration."""


class PicardError(RuntimeError):
    """Picard iteration did not contract within the iteration budget."""


class WindowCollapse(RuntimeError):
    """Repeated window halving failed: the run has left the small-data regime."""


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of a stochastic Lagrangian Navier-Stokes run.

    Exactly one of ``nu`` and ``R`` is given; with ``R`` the viscosity is
    ``nu = (L/R) |u0|_{k+1,alpha}``. ``window`` of ``None`` picks the largest
    window with ``U window / L < delta_num``. ``picard_tol`` is relative to
    ``|u_start|_2`` and floored at ten times the Monte-Carlo stderr.
    """

    d: int = 2
    N: int = 32
    L: float = 2 * math.pi
    nu: float | None = None
    R: float | None = None
    k: int = 1
    alpha: float = 0.5
    M: int = 4096
    dt: float = 0.05
    T: float = 0.5
    window: float | None = None
    delta_num: float = DELTA_NUM
    picard_tol: float = 1e-3
    max_picard: int = MAX_PICARD
    max_halvings: int = MAX_HALVINGS
    route: str = "projection"
    seed: int = 0
    scheme: str = "heun"
    recover_every: int = 0
    block_size: int = 256
    cross_check: bool = False
    record_holder: bool = True
    newton: bool = False

    def __post_init__(self):
        if (self.nu is None) == (self.R is None):
            raise ConfigError("exactly one of nu and R must be set (nu XOR R)")
        if self.nu is not None and not self.nu >= 0:
            raise ConfigError(f"nu must be nonnegative, got {self.nu}")
        if self.R is not None and not self.R > 0:
            raise ConfigError(f"R must be positive, got {self.R}")
        if self.route not in ROUTES:
            raise ConfigError(f"route must be one of {ROUTES}, got {self.route!r}")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if not (self.dt > 0 and self.T >= 0):
            raise ConfigError("dt must be positive and T nonnegative")
        if not 0 < self.delta_num < 1:
            raise ConfigError("delta_num must lie in (0, 1)")
        HolderParams(self.k, self.alpha)

    @property
    def grid(self) -> PeriodicGrid:
        return PeriodicGrid(self.d, self.N, self.L)

    @property
    def params(self) -> HolderParams:
        return HolderParams(self.k, self.alpha)

    def viscosity(self, u0: Field) -> float:
        if self.nu is not None:
            return float(self.nu)
        return float(self.L / self.R * velocity_norm(u0, self.params))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------ recovery routes


def _projection_samples(grid: PeriodicGrid, u0_coef: np.ndarray, ell: np.ndarray,
                        grad_a: np.ndarray) -> np.ndarray:
    """Per-realization ``(grad^T A)(u0 o A)``; ``grad_a[:, i, j] = d_j A_i``."""
    v = _eval(grid, u0_coef, ell)
    d = grid.d
    return np.stack([sum(grad_a[:, j, i] * v[:, j] for j in range(d)) for i in range(d)],
                    axis=1)


def _vorticity_samples(grid: PeriodicGrid, w0_coef: np.ndarray, ell: np.ndarray,
                       grad_a: np.ndarray) -> np.ndarray:
    """Per-realization ``omega0 o A`` (d=2) or ``(grad A)^{-1}(omega0 o A)`` (d=3)."""
    w = _eval(grid, w0_coef, ell)
    if grid.d == 2:
        return w[:, 0]
    inv = _inverse_matrices(grad_a, 3)
    return np.stack([sum(inv[:, i, j] * w[:, j] for j in range(3)) for i in range(3)], axis=1)


def _gauge(grid: PeriodicGrid, hat: np.ndarray) -> np.ndarray:
    hat = hat.copy()
    hat[(Ellipsis,) + (0,) * grid.d] = 0.0
    return hat


def finalize_projection(grid: PeriodicGrid, mean: np.ndarray) -> Field:
    """Leray-project an ensemble average and remove its mean."""
    return Field(grid, grid.ifft(_gauge(grid, leray_hat(grid, grid.fft(mean)))))


def finalize_vorticity(grid: PeriodicGrid, mean: np.ndarray) -> Field:
    """Biot-Savart velocity of an averaged vorticity (mean removed, solenoidal part in 3D)."""
    hat = _gauge(grid, grid.fft(mean))
    if grid.d == 3:
        hat = leray_hat(grid, hat)
    return biot_savart(Field(grid, grid.ifft(hat)))


def _require_inverse(state: FlowState):
    if state.ell is None:
        raise FieldError("flow state has no inverse map; call invert_flow first")
    if state.grad_a is None:
        state.grad_a = spectral_gradient(state.grid, state.ell)


def _shared_coef(f: Field) -> np.ndarray:
    from stochlag.fields import spline_coefficients

    vals = f.values if f.rank == 1 else f.values[None]
    return spline_coefficients(f.grid, vals)[None]


def velocity_from_inverse_map(u0: Field, state: FlowState) -> Field:
    """``E P[(grad^T A)(u0 o A)]`` over the realizations of ``state``.

    Missing ``grad_a`` is filled from the spectral gradient of ``ell``.
    """
    _require_inverse(state)
    s = _projection_samples(state.grid, _shared_coef(u0), state.ell, state.grad_a)
    return finalize_projection(state.grid, s.mean(axis=0))


def velocity_from_vorticity(u0: Field, state: FlowState) -> Field:
    """Transported (and in 3D stretched) averaged vorticity, then Biot-Savart."""
    _require_inverse(state)
    w0 = curl(u0)
    s = _vorticity_samples(state.grid, _shared_coef(w0), state.ell, state.grad_a)
    return finalize_vorticity(state.grid, s.mean(axis=0))


# ------------------------------------------------------------------ windows


@dataclass
class Recovery:
    """Recovered velocity at one time with its Monte-Carlo stderr (L2 norm)."""

    t: float
    u: Field
    stderr: float
    alt: Field | None = None
    alt_stderr: float = float("nan")
    inversion_residual: float = 0.0


@dataclass
class WindowResult:
    t_start: float
    t_end: float
    recoveries: list
    iterations: int
    diffs: list
    tolerance: float
    driver_window: int

    @property
    def u_end(self) -> Field:
        return self.recoveries[-1].u

    @property
    def ratios(self) -> list:
        return [b / a if a > 0 else 0.0 for a, b in zip(self.diffs, self.diffs[1:])]


def _capture_steps(n_steps: int, every: int) -> list:
    if every <= 0 or every >= n_steps:
        return [n_steps]
    steps = list(range(every, n_steps + 1, every))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return steps


def _project_batch(grid: PeriodicGrid, samples: np.ndarray) -> np.ndarray:
    """Leray projection and mean removal applied to every realization."""
    return grid.ifft(_gauge(grid, leray_hat(grid, grid.fft(samples))))


def _biot_savart_batch(grid: PeriodicGrid, samples: np.ndarray) -> np.ndarray:
    """Biot-Savart velocity of every realization's vorticity (mean removed)."""
    from stochlag.fields import biot_savart_hat

    hat = _gauge(grid, grid.fft(samples))
    if grid.d == 3:
        hat = leray_hat(grid, hat)
    return grid.ifft(biot_savart_hat(grid, hat, scalar=grid.d == 2))


def _recover_window(u_start: Field, schedule: VelocitySchedule, nu: float, driver: WienerDriver,
                    t_start: float, dt: float, n_steps: int, capture: list, cfg: SolverConfig,
                    both: bool) -> list:
    """Integrate all realizations over the window and recover at the captured steps.

    Biot-Savart is applied per realization before averaging so the
    vorticity route's stderr is that of a velocity. The projection route
    projects the average; its pre-projection stderr bounds the projected one
    because the Leray projection is an L2 contraction.
    """
    grid = u_start.grid
    routes = {cfg.route}
    if both:
        routes = set(ROUTES)
    ucoef = _shared_coef(u_start)
    wcoef = _shared_coef(curl(u_start)) if "vorticity" in routes else None
    accs = {(k, r): EnsembleAccumulator() for k in capture for r in routes}
    resid = dict.fromkeys(capture, 0.0)
    t_end = t_start + n_steps * dt
    for a, b in blocks(driver.M, cfg.block_size):
        steps = flow_steps(schedule, nu, driver, dt, t_end, t0=t_start, rows=(a, b),
                           scheme=cfg.scheme, gradient=None)
        for j, state in enumerate(steps):
            if j not in capture:
                continue
            invert_flow(state, newton=cfg.newton, with_gradient=False)
            resid[j] = max(resid[j], state.inversion_residual)
            state.grad_a = spectral_gradient(grid, state.ell)
            if "projection" in routes:
                s = _projection_samples(grid, ucoef, state.ell, state.grad_a)
                accs[(j, "projection")].add(s)
            if "vorticity" in routes:
                s = _vorticity_samples(grid, wcoef, state.ell, state.grad_a)
                accs[(j, "vorticity")].add(_biot_savart_batch(grid, s))
    out = []
    other = "vorticity" if cfg.route == "projection" else "projection"
    for k in capture:
        res = {}
        for r in routes:
            acc = accs[(k, r)]
            mean = acc.mean()
            se = np.nan_to_num(acc.stderr()) if driver.M > 1 else np.zeros_like(mean)
            se_l2 = float(np.sqrt(np.sum(se**2) * grid.cell_volume))
            u = finalize_projection(grid, mean) if r == "projection" else Field(grid, mean)
            res[r] = (u, se_l2)
        main, se_main = res[cfg.route]
        rec = Recovery(t_start + k * dt, main, se_main, inversion_residual=resid[k])
        if other in res:
            rec.alt, rec.alt_stderr = res[other]
        out.append(rec)
    return out


def _window_steps(delta: float, dt: float) -> tuple[int, float]:
    n = max(1, int(math.ceil(delta / dt - 1e-9)))
    return n, delta / n


def picard_window(u_start: Field, cfg: SolverConfig, driver: WienerDriver, *, nu: float,
                  t_start: float = 0.0, delta: float | None = None, cross_check: bool = False,
                  min_iterations: int = 1, max_iterations: int | None = None,
                  tolerance: float | None = None, strict: bool = True) -> WindowResult:
    """Fixed-point iteration for the velocity on ``[t_start, t_start + delta]``.

    ``u^(0)`` is ``u_start`` frozen in time; iterate ``n+1`` integrates the
    flows under ``u^(n)`` (linear in time between recovery times) with the
    same increments and recovers the velocity from ``u_start``. Stops when
    ``sup_t |u^(n+1) - u^(n)|_2 <= tol``. With ``strict=False`` the last
    iterate is returned instead of raising when the budget runs out.
    """
    grid = u_start.grid
    delta = cfg.window if delta is None else delta
    if delta is None:
        raise ConfigError("window length is required")
    n_steps, dt = _window_steps(delta, cfg.dt)
    capture = _capture_steps(n_steps, cfg.recover_every)
    times = [t_start] + [t_start + k * dt for k in capture]
    current = [u_start] * len(capture)
    max_iterations = cfg.max_picard if max_iterations is None else max_iterations
    scale = u_start.norm_l2()
    diffs = []
    tol = 0.0
    recs = []
    for it in range(1, max_iterations + 1):
        sched = VelocitySchedule(grid, times, np.stack([u_start.values] + [c.values for c in current]))
        recs = _recover_window(u_start, sched, nu, driver, t_start, dt, n_steps, capture, cfg,
                               both=cross_check)
        new = [r.u for r in recs]
        diff = max((a - b).norm_l2() for a, b in zip(new, current))
        diffs.append(diff)
        se = max(r.stderr for r in recs)
        tol = max(cfg.picard_tol * scale, 10.0 * se) if tolerance is None else tolerance
        current = new
        if diff <= tol and it >= min_iterations:
            return WindowResult(t_start, t_start + delta, recs, it, diffs, tol, driver.window)
    if not strict:
        return WindowResult(t_start, t_start + delta, recs, max_iterations, diffs, tol,
                            driver.window)
    raise PicardError(f"no contraction after {max_iterations} Picard iterations "
                      f"(last difference {diffs[-1]:.3g}, tolerance {tol:.3g})")


# -------------------------------------------------------------------- solve


def window_limit(U: float, L: float, delta_num: float = DELTA_NUM) -> float:
    """Largest window with ``U window / L < delta_num`` (infinite for ``U = 0``)."""
    return math.inf if U == 0 else delta_num * L / U


def translate(f: Field, shift) -> Field:
    """``f(x - shift)`` by a spectral phase shift."""
    g = f.grid
    phase = sum(k * s for k, s in zip(g.kd, shift))
    return Field(g, g.ifft(f.hat * np.exp(-1j * phase)))


@dataclass
class SolveTrace:
    """Per-record diagnostics of a solve; row ``i`` describes time ``t[i]``."""

    config: dict
    nu: float
    U: float
    window: float
    mean_velocity: tuple
    rows: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    final: Field | None = None
    snapshots: dict = field(default_factory=dict)

    COLUMNS = [
        ("t", "time"),
        ("window", "window index (0 = initial data)"),
        ("l2", "|u|_2 = (int |u|^2 dx)^(1/2)"),
        ("l2_stderr", "Monte-Carlo stderr of |u|_2 (L2 norm of per-node stderr, carried)"),
        ("holder", "|u|_{k+1,alpha} (L-weighted Hoelder norm)"),
        ("div_residual", "|div u|_2 L / |u|_2 (spectral)"),
        ("mean_residual", "|mean u - mean u0| / |u|_2"),
        ("picard_iters", "Picard iterations of the window"),
        ("picard_diff", "last sup_t |u^(n+1)-u^(n)|_2"),
        ("picard_tol", "Picard tolerance used"),
        ("route_discrepancy", "|u_proj - u_vort|_2 / |u|_2 (nan if not cross-checked)"),
        ("route_tol", "max(5 pooled stderr, 2%) relative (nan if not cross-checked)"),
        ("halvings", "window halvings applied"),
        ("inversion_residual", "max |X o A - I|_inf / L over realizations"),
    ]

    def column(self, name: str) -> np.ndarray:
        idx = [c for c, _ in self.COLUMNS].index(name)
        return np.array([r[idx] for r in self.rows], float)

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    @property
    def holder(self) -> np.ndarray:
        return self.column("holder")

    @property
    def l2(self) -> np.ndarray:
        return self.column("l2")

    @property
    def t_min(self) -> float:
        """Time of the smallest recorded ``|u_t|_{k+1,alpha}`` (first one on ties)."""
        h = self.holder
        return float(self.t[int(np.nanargmin(h))])

    def write_csv(self, path):
        return write_table(path, [c for c, _ in self.COLUMNS], [u for _, u in self.COLUMNS],
                           self.rows)


def _divergence_residual(u: Field) -> float:
    n = u.norm_l2()
    if n == 0:
        return 0.0
    return divergence(u).norm_l2() * u.grid.L / n


def solve(u0: Field, cfg: SolverConfig, *, cross_check: bool | None = None,
          snapshot_dir=None, snapshot_times=(), on_window=None) -> SolveTrace:
    """March ``[0, T]`` in Picard windows and record a :class:`SolveTrace`.

    A nonzero mean velocity is removed first (the problem is solved in the
    frame moving with the mean and shifted back for every record).
    """
    cross_check = cfg.cross_check if cross_check is None else cross_check
    grid = u0.grid
    if grid.d != cfg.d or grid.N != cfg.N or not np.isclose(grid.L, cfg.L):
        raise ConfigError("initial data grid does not match the configuration")
    if u0.rank != 1:
        raise FieldError("initial velocity must be a vector field")
    if _divergence_residual(u0) > 1e-8:
        raise FieldError("initial velocity is not divergence-free")
    params = cfg.params
    nu = cfg.viscosity(u0)
    mean = u0.mean()
    rms = max(u0.norm_l2() / math.sqrt(grid.L**grid.d), np.finfo(float).tiny)
    moving = bool(np.any(np.abs(mean) > 1e-12 * rms))
    v0 = Field(grid, u0.values - mean.reshape((grid.d,) + (1,) * grid.d)) if moving else u0
    U = velocity_norm(v0, params)
    limit = window_limit(U, grid.L, cfg.delta_num)
    if cfg.window is not None:
        if U * cfg.window / grid.L >= cfg.delta_num:
            raise ConfigError(
                f"window contraction U*window/L = {U * cfg.window / grid.L:.3g} >= delta_num "
                f"= {cfg.delta_num} (U = |u0|_(k+1,alpha) = {U:.4g})"
            )
        delta = cfg.window
    else:
        delta = limit * (1 - 1e-9)
    n_windows = max(1, int(math.ceil(cfg.T / delta - 1e-9))) if cfg.T > 0 else 0
    delta = cfg.T / n_windows if n_windows else 0.0
    trace = SolveTrace(config=cfg.as_dict(), nu=nu, U=U, window=delta,
                       mean_velocity=tuple(float(m) for m in mean))
    base_driver = WienerDriver(cfg.seed, cfg.M, grid.d)
    snap_todo = sorted(float(s) for s in snapshot_times)

    def lab(v: Field, t: float) -> Field:
        if not moving:
            return v
        shifted = translate(v, mean * t)
        return Field(grid, shifted.values + mean.reshape((grid.d,) + (1,) * grid.d))

    def record(t, w, v, se, win=None, halvings=0):
        u = lab(v, t)
        n2 = u.norm_l2()
        hol = holder_norm(u, HolderParams(params.k + 1, params.alpha)).full \
            if cfg.record_holder else float("nan")
        mres = float(np.abs(u.mean() - mean).max()) / max(n2, np.finfo(float).tiny)
        disc, dtol = float("nan"), float("nan")
        inv = 0.0
        rec = None
        if win is not None:
            rec = next((r for r in win.recoveries if abs(r.t - t) < 1e-12), None)
        if rec is not None and rec.alt is not None:
            vn = max(rec.u.norm_l2(), np.finfo(float).tiny)
            disc = (rec.u - rec.alt).norm_l2() / vn
            dtol = max(5 * math.hypot(rec.stderr, rec.alt_stderr) / vn, 0.02)
        if rec is not None:
            inv = rec.inversion_residual / grid.L
        trace.rows.append([
            t, w, n2, se, hol, _divergence_residual(u), mres,
            win.iterations if win else 0,
            win.diffs[-1] if win else 0.0,
            win.tolerance if win else 0.0,
            disc, dtol, halvings, inv,
        ])
        while snap_todo and snap_todo[0] <= t + 1e-12:
            snap_todo.pop(0)
            trace.snapshots[t] = u
            if snapshot_dir is not None:
                write_snapshot(Path(snapshot_dir) / f"u_t{t:.6f}.bin", u)

    record(0.0, 0, v0, 0.0)
    v = v0
    carry = 0.0
    t = 0.0
    driver_id = 0
    for w in range(1, n_windows + 1):
        t_target = min(w * delta, cfg.T) if w < n_windows else cfg.T
        pending = [(t, t_target - t, 0)]
        while pending:
            ts, dl, level = pending.pop(0)
            drv = base_driver.for_window(driver_id)
            driver_id += 1
            try:
                res = picard_window(v, cfg, drv, nu=nu, t_start=ts, delta=dl,
                                    cross_check=cross_check)
            except PicardError as exc:
                if level >= cfg.max_halvings:
                    raise WindowCollapse(
                        f"window collapse at t={ts:.4g}: {exc}; halved {level} times "
                        "(left the small-data regime UT/L < delta)"
                    ) from exc
                log.info("halving window at t=%.4g (level %d)", ts, level + 1)
                pending[:0] = [(ts, dl / 2, level + 1), (ts + dl / 2, dl / 2, level + 1)]
                continue
            trace.windows.append(res)
            for r in res.recoveries:
                se = math.sqrt(r.stderr**2 + carry**2)
                record(r.t, w, r.u, se, res, level)
            carry = math.sqrt(res.recoveries[-1].stderr**2 + carry**2)
            v = res.u_end
            if on_window is not None:
                on_window(res)
        t = t_target
    trace.final = lab(v, cfg.T)
    return trace


# ------------------------------------------------------- norm-decay experiment


@dataclass
class DecayExperiment:
    rows: list
    slope: float
    slope_envelope: float
    expected_slope: float
    traces: dict

    COLUMNS = [
        ("R", "Reynolds number (L/nu)|u0|_{k+1,alpha}"),
        ("nu", "viscosity"),
        ("T_dec", "first recorded t>0 with |u_t|_{k+1,alpha} <= |u0|_{k+1,alpha} (nan: none)"),
        ("t_min", "time of the smallest recorded |u_t|_{k+1,alpha}"),
        ("min_ratio", "min_t |u_t|_{k+1,alpha} / |u0|_{k+1,alpha}"),
        ("t0_envelope", "minimizer of the fitted c_d (L^2/(nu t))^(d'/2) + c_g (Ut/L)^alpha"),
        ("no_decay", "1 if no decay within the horizon"),
    ]

    def write_csv(self, path):
        return write_table(path, [c for c, _ in self.COLUMNS], [u for _, u in self.COLUMNS],
                           self.rows)

    def summary(self) -> dict:
        return {
            "slope_t_min_vs_R": self.slope,
            "slope_t0_envelope_vs_R": self.slope_envelope,
            "expected_slope": self.expected_slope,
            "rows": len(self.rows),
        }


def envelope_minimizer(c_decay, c_growth, nu, U, L, d_eff, alpha) -> float:
    """Minimizer of ``c_d (L^2/(nu t))^{d'/2} + c_g (U t / L)^alpha`` over ``t > 0``."""
    if not (c_decay > 0 and c_growth > 0):
        return float("nan")
    # derivative zero: c_d (d'/2) (L^2/nu)^{d'/2} t^{-d'/2-1} = c_g alpha (U/L)^alpha t^{alpha-1}
    num = c_decay * (d_eff / 2) * (L**2 / nu) ** (d_eff / 2)
    den = c_growth * alpha * (U / L) ** alpha
    return float((num / den) ** (1.0 / (alpha + d_eff / 2)))


def _slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def norm_decay_experiment(u0: Field, R_values, cfg: SolverConfig, *, eps: float = 0.1,
                          progress=None) -> DecayExperiment:
    """For each ``R`` solve with ``nu = (L/R)|u0|_{k+1,alpha}`` and locate decay times.

    ``t_min`` is the minimizer over the recorded trace; ``t0_envelope`` is
    the minimizer of the decay/growth envelope fitted to that trace.
    """
    from stochlag.transport import effective_dimension, fit_holder_envelope

    grid = u0.grid
    params = cfg.params
    d_eff = effective_dimension(grid.d, eps)
    rows, traces = [], {}
    for i, R in enumerate(R_values):
        c = replace(cfg, nu=None, R=float(R), seed=cfg.seed + i, record_holder=True)
        tr = solve(u0, c)
        traces[float(R)] = tr
        h = tr.holder
        t = tr.t
        h0 = h[0]
        ratio = h / h0
        later = np.nonzero((t > 0) & (ratio <= 1.0))[0]
        t_dec = float(t[later[0]]) if len(later) else float("nan")
        cd, cg, _ = fit_holder_envelope(t, h, h0, tr.nu, tr.U, grid.L, d_eff, params.alpha,
                                        t_min=0.0)
        t0 = envelope_minimizer(cd, cg, tr.nu, tr.U, grid.L, d_eff, params.alpha)
        rows.append([float(R), tr.nu, t_dec, tr.t_min, float(np.nanmin(ratio[1:]))
                     if len(ratio) > 1 else 1.0, t0, not len(later)])
        if progress is not None:
            progress(rows[-1])
    Rs = [r[0] for r in rows]
    return DecayExperiment(
        rows=rows,
        slope=_slope(Rs, [r[3] for r in rows]),
        slope_envelope=_slope(Rs, [r[5] for r in rows]),
        expected_slope=grid.d / (2 * params.alpha + grid.d),
        traces=traces,
    )
