"""Stochastic representation of drift-diffusion (heat) flows and their decay diagnostics.

``theta_t = E theta_0(A_t)``: the solution of ``theta_t + u.grad(theta) = nu lap(theta)``
is the expectation of the initial data composed with the back-to-labels map
of the noisy flow. The expectation is an ``M``-sample average; a per-node
standard-error field is always attached.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.signal import resample

from stochlag.checks import Check, at_most
from stochlag.fields import Field, FieldError
from stochlag.flowmap import (
    EnsembleAccumulator,
    VelocitySchedule,
    WienerDriver,
    _n_steps,
    blocks,
    compose_ensemble,
    flow_steps,
    invert_flow,
)
from stochlag.io import write_json, write_table
from stochlag.norms import HolderParams, holder_norm
from stochlag.oracle import OracleConfig, advect_diffuse, dissipation

log = logging.getLogger(__name__)

DEFAULT_BLOCK = 256
DEFAULT_EPS = 0.1


@dataclass
class StochasticEstimate:
    """Monte-Carlo estimate of ``theta`` at one time."""

    t: float
    mean: Field
    stderr: Field
    M: int
    windows: int = 1
    integral: float = 0.0
    integral_stderr: float = 0.0
    partials: EnsembleAccumulator | None = None

    def stderr_l2(self) -> float:
        return self.stderr.norm_l2()

    def truncated(self, M: int) -> tuple[Field, Field]:
        """Mean and stderr from the first ``M`` realizations (block aligned, single window only)."""
        if self.partials is None:
            raise ValueError("per-block partials are only kept for single-window solves")
        sub = EnsembleAccumulator()
        total = 0
        for blk in self.partials._blocks:
            if total >= M:
                break
            sub._blocks.append(blk)
            total += blk[0]
        if total != M:
            raise ValueError(f"M={M} is not a multiple of the block size")
        g = self.mean.grid
        return Field(g, sub.mean()), Field(g, sub.stderr())

    def group_means(self, M: int) -> list[Field]:
        """Means of the disjoint consecutive groups of ``M`` realizations."""
        if self.partials is None:
            raise ValueError("per-block partials are only kept for single-window solves")
        g = self.mean.grid
        out, cur, total = [], EnsembleAccumulator(), 0
        for blk in self.partials._blocks:
            cur._blocks.append(blk)
            total += blk[0]
            if total == M:
                out.append(Field(g, cur.mean()))
                cur, total = EnsembleAccumulator(), 0
            elif total > M:
                raise ValueError(f"M={M} is not a multiple of the block size")
        return out


def ensemble_size_sweep(estimate: StochasticEstimate, reference: Field, sizes) -> dict:
    """RMS relative L2 error over disjoint sub-ensembles of each size, and the log-log slope.

    Averaging over disjoint groups estimates the expected error at each size
    instead of one noisy draw of it. The slope is a weighted least-squares
    fit with weight proportional to the number of groups, the inverse
    variance of each log-RMS estimate.
    """
    ref = reference.norm_l2()
    errors, groups = [], []
    for M in sizes:
        errs = [(m - reference).norm_l2() / ref for m in estimate.group_means(M)]
        errors.append(float(np.sqrt(np.mean(np.square(errs)))))
        groups.append(len(errs))
    w = np.sqrt(np.asarray(groups, float))
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1, w=w)[0])
    return {"sizes": list(sizes), "errors": errors, "groups": groups, "slope": slope}


def _as_schedule(u) -> VelocitySchedule:
    return VelocitySchedule.steady(u) if isinstance(u, Field) else u


def _step_index(t, t0, dt, n_total) -> int:
    k = int(round((t - t0) / dt))
    if abs(t0 + k * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= n_total:
        raise ValueError(f"sample time {t} is not on the dt grid of [{t0}, {t0 + n_total * dt}]")
    return k


def window_checksums(driver: WienerDriver, dt: float, t_end: float, window: float | None = None,
                     t0: float = 0.0) -> list:
    """Increment checksums of every restart window used by :func:`solve_heat_stochastic`."""
    n_total = _n_steps(t0, t_end, dt)
    per = max(n_total if window is None else _n_steps(0.0, window, dt), 1)
    return [{"window": w, "steps": min(s0 + per, n_total) - s0,
             "checksum": driver.for_window(w).checksum(min(s0 + per, n_total) - s0)}
            for w, s0 in enumerate(range(0, n_total, per))]


def solve_heat_stochastic(theta0: Field, u, nu: float, driver: WienerDriver, dt: float,
                          t_end: float, *, t0: float = 0.0, sample_times=None,
                          window: float | None = None, scheme: str = "heun",
                          block_size: int = DEFAULT_BLOCK, on_block=None,
                          newton: bool = False):
    """Ensemble average of ``theta0 o A_t``.

    Returns a single :class:`StochasticEstimate` at ``t_end`` or, when
    ``sample_times`` is given, a list aligned with it. With ``window`` set
    the flow is restarted every ``window`` time units from the current mean
    with fresh increments; stderr from earlier windows is carried in
    quadrature. ``on_block(t, rows, values)`` sees every block's
    realizations. ``newton`` selects Newton steps for the map inversion.
    """
    grid = theta0.grid
    if theta0.rank != 0:
        raise FieldError("solve_heat_stochastic transports scalar fields")
    if driver.M < 2 and nu > 0:
        raise ValueError("ensemble size M < 2 gives no Monte-Carlo error estimate")
    u = _as_schedule(u)
    n_total = _n_steps(t0, t_end, dt)
    per = n_total if window is None else _n_steps(0.0, window, dt)
    per = max(per, 1)
    wanted = [t_end] if sample_times is None else list(sample_times)
    targets = sorted({_step_index(t, t0, dt, n_total) for t in wanted})
    single = per >= n_total

    results = {}
    zero = np.zeros(grid.shape)
    if 0 in targets:
        results[0] = StochasticEstimate(t0, theta0, Field(grid, zero), driver.M, 0,
                                        theta0.integral(), 0.0)
    current = theta0.values
    carry = zero.copy()
    icarry = 0.0
    for w, s0 in enumerate(range(0, n_total, per)):
        s1 = min(s0 + per, n_total)
        capture = sorted({k for k in targets if s0 < k <= s1} | {s1})
        accs = {k: EnsembleAccumulator() for k in capture}
        iaccs = {k: EnsembleAccumulator() for k in capture}
        drv = driver.for_window(w)
        for a, b in blocks(driver.M, block_size):
            steps = flow_steps(u, nu, drv, dt, t0 + s1 * dt, t0=t0 + s0 * dt, rows=(a, b),
                               scheme=scheme, gradient=None)
            for j, state in enumerate(steps):
                k = s0 + j
                if k not in accs:
                    continue
                invert_flow(state, newton=newton, with_gradient=False)
                vals = compose_ensemble(grid, current[None], state.ell)[:, 0]
                accs[k].add(vals)
                iaccs[k].add(vals.reshape(vals.shape[0], -1).sum(axis=1) * grid.cell_volume)
                if on_block is not None:
                    on_block(t0 + k * dt, (a, b), vals)
        for k in capture:
            se = np.nan_to_num(accs[k].stderr()) if driver.M > 1 else zero
            ise = float(np.nan_to_num(iaccs[k].stderr())) if driver.M > 1 else 0.0
            results[k] = StochasticEstimate(
                t=t0 + k * dt,
                mean=Field(grid, accs[k].mean()),
                stderr=Field(grid, np.sqrt(se**2 + carry)),
                M=driver.M,
                windows=w + 1,
                integral=float(iaccs[k].mean()),
                integral_stderr=float(np.sqrt(ise**2 + icarry)),
                partials=accs[k] if single else None,
            )
        end = results[s1]
        current = end.mean.values
        carry = end.stderr.values**2
        icarry = end.integral_stderr**2
    if sample_times is None:
        return results[n_total]
    return [results[_step_index(t, t0, dt, n_total)] for t in wanted]


# ---------------------------------------------------------------- decay study


def effective_dimension(d: int, eps: float = DEFAULT_EPS) -> float:
    """``d + eps`` in two dimensions, ``d`` otherwise."""
    return d + eps if d == 2 else float(d)


def fit_c_inf(times, linf, linf0, nu, L, d_eff, t_min=0.0) -> float:
    """``sup_t |theta_t|_inf (nu t / L^2)^{d_eff/2} / |theta_0|_inf`` over ``t > t_min``."""
    times = np.asarray(times, float)
    keep = times > max(t_min, 0.0)
    if not keep.any() or linf0 == 0:
        return float("nan")
    vals = np.asarray(linf, float)[keep] * (nu * times[keep] / L**2) ** (d_eff / 2) / linf0
    return float(vals.max())


def fit_holder_envelope(times, holder, holder0, nu, U, L, d_eff, alpha, t_min=0.0):
    """Nonnegative least-squares fit of ``c_d (L^2/(nu t))^{d_eff/2} + c_g (U t / L)^alpha``.

    Returns ``(c_decay, c_growth, worst)`` where ``worst`` is the largest
    ratio of data to fitted envelope.
    """
    times = np.asarray(times, float)
    keep = times > max(t_min, 0.0)
    if keep.sum() < 2 or holder0 == 0:
        return float("nan"), float("nan"), float("nan")
    t = times[keep]
    y = np.asarray(holder, float)[keep] / holder0
    design = np.stack([(L**2 / (nu * t)) ** (d_eff / 2), (U * t / L) ** alpha], axis=1)
    scale = np.abs(design).max(axis=0)
    scale[scale == 0] = 1.0
    coef, _ = nnls(design / scale, y)
    coef = coef / scale
    env = design @ coef
    worst = float(np.max(np.where(env > 0, y / np.where(env > 0, env, 1.0), np.inf)))
    return float(coef[0]), float(coef[1]), worst


def _norm_row(theta: Field, params: HolderParams) -> dict:
    hp = HolderParams(params.k + 1, params.alpha)
    return {
        "linf": theta.norm_inf(),
        "l1": theta.norm_l1(),
        "l2": theta.norm_l2(),
        "holder": holder_norm(theta, hp).full,
    }


@dataclass
class DecayReport:
    """Norm time series of a heat flow and the fitted decay envelopes."""

    times: np.ndarray
    d: int
    L: float
    nu: float
    U: float
    eps: float
    d_eff: float
    params: HolderParams
    t_fit_min: float
    oracle: dict
    stochastic: dict | None = None
    c_inf: float = float("nan")
    c_decay: float = float("nan")
    c_growth: float = float("nan")
    envelope_worst: float = float("nan")
    c_inf_stochastic: float = float("nan")
    c_decay_stochastic: float = float("nan")
    c_growth_stochastic: float = float("nan")
    extra: dict = field(default_factory=dict)

    COLUMNS = [
        ("t", "time"),
        ("oracle_linf", "max_x |theta|"),
        ("oracle_l1", "int |theta| dx"),
        ("oracle_l2", "(int theta^2 dx)^(1/2)"),
        ("oracle_holder", "|theta|_{k+1,alpha} (L-weighted)"),
        ("sto_linf", "max_x |E theta| (ensemble mean)"),
        ("sto_l1", "int |E theta| dx"),
        ("sto_l2", "(int (E theta)^2 dx)^(1/2)"),
        ("sto_holder", "|E theta|_{k+1,alpha} (norm of mean)"),
        ("sto_holder_pathwise", "mean over sampled paths of |theta0 o A|_{k+1,alpha}"),
        ("sto_stderr_l2", "L2 norm of per-node standard error"),
    ]

    def rows(self):
        n = len(self.times)
        sto = self.stochastic or {}
        nan = np.full(n, np.nan)
        for i in range(n):
            yield [
                self.times[i],
                self.oracle["linf"][i],
                self.oracle["l1"][i],
                self.oracle["l2"][i],
                self.oracle["holder"][i],
                sto.get("linf", nan)[i],
                sto.get("l1", nan)[i],
                sto.get("l2", nan)[i],
                sto.get("holder", nan)[i],
                sto.get("holder_pathwise", nan)[i],
                sto.get("stderr_l2", nan)[i],
            ]

    def summary(self) -> dict:
        return {
            "d": self.d,
            "L": self.L,
            "nu": self.nu,
            "U": self.U,
            "eps": self.eps,
            "d_eff": self.d_eff,
            "k": self.params.k,
            "alpha": self.params.alpha,
            "t_fit_min": self.t_fit_min,
            "c_inf": self.c_inf,
            "c_decay": self.c_decay,
            "c_growth": self.c_growth,
            "envelope_worst_ratio": self.envelope_worst,
            "c_inf_stochastic": self.c_inf_stochastic,
            "c_decay_stochastic": self.c_decay_stochastic,
            "c_growth_stochastic": self.c_growth_stochastic,
            **self.extra,
        }

    def write(self, out_dir, stem: str = "heat_decay"):
        from pathlib import Path

        out_dir = Path(out_dir)
        names = [c for c, _ in self.COLUMNS]
        units = [u for _, u in self.COLUMNS]
        csv_path = write_table(out_dir / f"{stem}.csv", names, units, self.rows())
        json_path = write_json(out_dir / f"{stem}_summary.json", self.summary())
        return csv_path, json_path


def measure_U(u, params: HolderParams) -> float:
    """``U = sup_t |u_t|_{k+1,alpha}`` over the samples of a velocity schedule."""
    u = _as_schedule(u)
    hp = HolderParams(params.k + 1, params.alpha)
    return max(holder_norm(Field(u.grid, v), hp).full for v in u.values)


def decay_study(theta0: Field, u, nu: float, sample_times, *,
                params: HolderParams | None = None, eps: float = DEFAULT_EPS,
                oracle_cfg: OracleConfig | None = None, driver: WienerDriver | None = None,
                dt: float | None = None, scheme: str = "heun", window: float | None = None,
                pathwise: int = 8, block_size: int = DEFAULT_BLOCK) -> DecayReport:
    """Run the oracle (and, with ``driver``, the stochastic solver) and fit decay envelopes.

    Envelope fits use only sample times ``t >= 2 dt``.
    """
    params = params or HolderParams()
    oracle_cfg = oracle_cfg or OracleConfig()
    u = _as_schedule(u)
    g = theta0.grid
    times = np.asarray(sorted(sample_times), float)
    U = measure_U(u, params)
    d_eff = effective_dimension(g.d, eps)
    step = dt if driver is not None and dt is not None else oracle_cfg.dt
    t_fit_min = 2.0 * step - 1e-12

    def series(fields):
        rows = [_norm_row(f, params) for f in fields]
        return {key: np.array([r[key] for r in rows]) for key in rows[0]}

    oracle_fields = advect_diffuse(theta0, u, nu, oracle_cfg, list(times))
    orc = series(oracle_fields)
    base = _norm_row(theta0, params)
    report = DecayReport(times=times, d=g.d, L=g.L, nu=nu, U=U, eps=eps, d_eff=d_eff,
                         params=params, t_fit_min=t_fit_min, oracle=orc)
    report.c_inf = fit_c_inf(times, orc["linf"], base["linf"], nu, g.L, d_eff, t_fit_min)
    report.c_decay, report.c_growth, report.envelope_worst = fit_holder_envelope(
        times, orc["holder"], base["holder"], nu, U, g.L, d_eff, params.alpha, t_fit_min)

    if driver is not None:
        if dt is None:
            raise ValueError("stochastic decay study needs dt")
        hp = HolderParams(params.k + 1, params.alpha)
        pathwise_norms: dict[float, list] = {}

        def on_block(t, rows, vals):
            if rows[0] != 0:
                return
            pathwise_norms[round(t, 12)] = [holder_norm(Field(g, vals[r]), hp).full
                                           for r in range(min(pathwise, vals.shape[0]))]

        t_end = float(times[-1])
        ests = solve_heat_stochastic(theta0, u, nu, driver, dt, t_end, sample_times=list(times),
                                     window=window, scheme=scheme, block_size=block_size,
                                     on_block=on_block)
        sto = series([e.mean for e in ests])
        sto["stderr_l2"] = np.array([e.stderr_l2() for e in ests])
        sto["holder_pathwise"] = np.array([
            np.mean(pathwise_norms[round(t, 12)]) if round(t, 12) in pathwise_norms else base["holder"]
            for t in times
        ])
        report.stochastic = sto
        report.c_inf_stochastic = fit_c_inf(times, sto["linf"], base["linf"], nu, g.L, d_eff,
                                            t_fit_min)
        report.c_decay_stochastic, report.c_growth_stochastic, _ = fit_holder_envelope(
            times, sto["holder"], base["holder"], nu, U, g.L, d_eff, params.alpha, t_fit_min)
    return report


# ------------------------------------------------------- heat-flow structure


def refined_extrema(f: Field, factor: int = 4) -> tuple[float, float]:
    """Min and max of the trigonometric interpolant on a ``factor``-times finer grid."""
    vals = f.values
    for ax in f.grid.axes:
        vals = resample(vals, vals.shape[ax] * factor, axis=ax)
    return float(vals.min()), float(vals.max())


def refined_l1(f: Field, factor: int = 8) -> float:
    """``|f|_1`` of the trigonometric interpolant, by the node rule on a refined grid.

    The plain node sum of ``|f|`` carries an O(h^2) error from the kinks of
    ``|f|`` whose drift in time can exceed the true per-step decrease.
    """
    vals = f.values
    for ax in f.grid.axes:
        vals = resample(vals, vals.shape[ax] * factor, axis=ax)
    return float(np.abs(vals).mean() * f.grid.L**f.grid.d)


def heat_structure_checks(theta0: Field, u, nu: float, t_end: float, *,
                          oracle_cfg: OracleConfig | None = None,
                          driver: WienerDriver | None = None, dt: float | None = None,
                          scheme: str = "heun", sigmas: float = 3.0) -> list[Check]:
    """Invariants of the drift-diffusion flow on the oracle path and, optionally, the stochastic path.

    Oracle: mean conservation, per-step energy identity
    ``d/dt |theta|_2^2 = -2 nu |grad theta|_2^2`` (trapezoidal in time),
    ``|theta|_2`` and ``|theta|_1`` nonincreasing, maximum principle.
    Stochastic: mean and maximum principle within ``sigmas`` standard errors.
    """
    cfg = oracle_cfg or OracleConfig()
    u = _as_schedule(u)
    g = theta0.grid
    l1_0 = refined_l1(theta0)
    lo, hi = refined_extrema(theta0)
    int0 = theta0.integral()
    hist = {"t": [0.0], "int": [int0], "l2sq": [theta0.norm_l2() ** 2], "l1": [l1_0],
            "diss": [dissipation(theta0)], "max": [theta0.values.max()],
            "min": [theta0.values.min()]}

    def on_step(t, th):
        hist["t"].append(t)
        hist["int"].append(th.integral())
        hist["l2sq"].append(th.norm_l2() ** 2)
        hist["l1"].append(refined_l1(th))
        hist["diss"].append(dissipation(th))
        hist["max"].append(th.values.max())
        hist["min"].append(th.values.min())

    advect_diffuse(theta0, u, nu, cfg, [t_end], on_step=on_step)
    h = {k: np.asarray(v, float) for k, v in hist.items()}
    scale = max(l1_0, 1e-300)
    checks = [
        at_most("oracle mean conservation |int theta_t - int theta_0| / |theta_0|_1",
                np.abs(h["int"] - int0).max() / scale, 1e-12),
    ]
    dtau = np.diff(h["t"])
    lhs = np.diff(h["l2sq"])
    rhs = -2 * nu * dtau * 0.5 * (h["diss"][1:] + h["diss"][:-1])
    energy_rel = np.abs(lhs - rhs) / np.maximum(h["l2sq"][:-1], 1e-300)
    checks.append(at_most("oracle energy identity per step (relative)", energy_rel.max(), 1e-6,
                          f"{len(dtau)} steps"))
    checks.append(at_most("oracle |theta|_2 nonincreasing (max relative increase)",
                          max(0.0, (np.diff(np.sqrt(h["l2sq"])) / np.sqrt(h["l2sq"][0])).max()),
                          1e-12))
    checks.append(at_most("oracle |theta|_1 nonincreasing (max relative increase)",
                          max(0.0, (np.diff(h["l1"]) / scale).max()), 1e-6))
    over = max(0.0, h["max"].max() - hi, lo - h["min"].min())
    checks.append(at_most("oracle maximum principle (overshoot of initial range)", over, 0.0,
                          f"range [{lo:.6g}, {hi:.6g}]"))

    if driver is not None:
        if dt is None:
            raise ValueError("stochastic checks need dt")
        est = solve_heat_stochastic(theta0, u, nu, driver, dt, t_end, scheme=scheme)
        dev = abs(est.integral - int0)
        # roundoff floor: the per-realization integral of a mean-zero field is not exactly zero
        tol = sigmas * est.integral_stderr + 1e-12 * scale
        checks.append(at_most("stochastic mean conservation |int E theta - int theta_0|", dev,
                              tol, f"M={driver.M}"))
        se = est.stderr.values
        excess = np.maximum(est.mean.values - (hi + sigmas * se), lo - sigmas * se - est.mean.values)
        worst = float(excess.max())
        checks.append(at_most("stochastic maximum principle (excess beyond 3 stderr)",
                              max(worst, 0.0), 0.0, f"M={driver.M}"))
    return checks
