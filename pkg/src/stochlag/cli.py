"""Batch experiment driver.

    stochlag [--config FILE] [--out DIR] [--seed-override N] [--threads N]
             [--cross-check-routes] {heat-decay,sln-solve,norm-decay-sweep,validate}

Configuration is INI text with one section per module. Exit status is 0 on
success, 1 when an invariant or guard fails at run time, 2 for usage and
configuration errors. Heavy modules are imported only after ``--threads``
has been applied to the environment, so the thread count reaches numba.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import json
import math
import os
import platform
import re
import sys
from dataclasses import dataclass
from pathlib import Path

OUTPUT_ROOT_ENV = "STOCHLAG_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "stochlag-runs"
SUBCOMMANDS = ("heat-decay", "sln-solve", "norm-decay-sweep", "validate")

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIG = """\
[run]
seed = 20240601

[grid]
d = 2
N = 32
L = 6.283185307179586

[heat]
nu = 0.1
M = 1024
dt = 0.05
times = 0.1, 0.2, 0.5, 1.0, 2.0
drift = cellular
amplitude = 1.0
theta0 = bump
oracle_dt = 0.001
window = 0.5

[sln]
nu = 0.5
M = 512
dt = 0.05
T = 0.02
initial = taylor-green

[sweep]
R_values = 0.05, 0.1, 0.2, 0.5
M = 256
T = 0.004

[validate]
M = 256
"""


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list:
    return [float(x) for x in re.split(r"[,\s]+", text.strip()) if x]


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


TWO_PI = 2 * math.pi

# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (int, 0)},
    "grid": {"d": (int, 2), "N": (int, 32), "L": (float, TWO_PI)},
    "heat": {
        "nu": (float, 0.1), "M": (int, 1024), "dt": (float, 0.05),
        "times": (_floats, [0.1, 0.2, 0.5, 1.0]), "drift": (str, "cellular"),
        "amplitude": (float, 1.0), "theta0": (str, "bump"), "eps": (float, 0.1),
        "oracle_dt": (float, 1e-3), "k": (int, 1), "alpha": (float, 0.5),
        "stochastic": (_bool, True), "window": (_opt_float, None), "pathwise": (int, 8),
    },
    "sln": {
        "nu": (_opt_float, None), "R": (_opt_float, None), "k": (int, 1),
        "alpha": (float, 0.5), "M": (int, 4096), "dt": (float, 0.05), "T": (float, 0.5),
        "window": (_opt_float, None), "delta_num": (float, 0.25), "picard_tol": (float, 1e-3),
        "route": (str, "projection"), "scheme": (str, "heun"), "recover_every": (int, 0),
        "initial": (str, "taylor-green"), "amplitude": (float, 1.0), "init_seed": (int, 0),
        "snapshot_times": (_floats, []), "block_size": (int, 256),
    },
    "sweep": {"R_values": (_floats, [0.05, 0.1, 0.2, 0.5]), "M": (int, 4096),
              "T": (float, 0.05), "recover_every": (int, 0), "eps": (float, 0.1)},
    "validate": {"M": (int, 256)},
}


@dataclass
class Config:
    text: str
    values: dict

    def section(self, name: str) -> dict:
        return self.values[name]


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            cur = m.group(1).strip()
            continue
        if cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> Config:
    """Parse and type-check INI text; every error names the section, key and line."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: malformed config: {exc}") from exc
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    given = {s: set() for s in SCHEMA}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}] "
                              f"(line {_line_of(text, sec, '') or '?'}); known: {sorted(SCHEMA)}")
        for key, raw in cp.items(sec):
            line = _line_of(text, sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}:{line}: unknown field [{sec}] {key}; "
                                  f"known: {sorted(SCHEMA[sec])}")
            parser = SCHEMA[sec][key][0]
            try:
                values[sec][key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}:{line}: field [{sec}] {key} = {raw!r}: {exc}") from exc
            given[sec].add(key)
    values["_given"] = given
    return Config(text, values)


def check_viscosity_rule(cfg: Config):
    s = cfg.section("sln")
    if (s["nu"] is None) == (s["R"] is None):
        raise ConfigError("[sln] exactly one of nu and R must be set (exclusive-or rule: "
                          "nu XOR R; R = (L/nu)|u0|_{k+1,alpha} fixes nu)")


# ------------------------------------------------------------------ manifest


def _sha1_file(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


def environment_fingerprint() -> dict:
    import numba
    import numpy
    import scipy

    from stochlag import __version__

    return {
        "stochlag": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "numba_threads": numba.get_num_threads(),
        "numba_threading_layer": os.environ.get("NUMBA_THREADING_LAYER", ""),
    }


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------- subcommands


def _grid(cfg: Config):
    from stochlag.fields import PeriodicGrid

    g = cfg.section("grid")
    return PeriodicGrid(g["d"], g["N"], g["L"])


def _initial_velocity(cfg: Config, grid):
    from stochlag.initial import random_small, taylor_green

    s = cfg.section("sln")
    if s["initial"] == "taylor-green":
        return taylor_green(grid, s["amplitude"])
    if s["initial"] == "random-small":
        return random_small(grid, s["init_seed"], s["amplitude"])
    raise ConfigError(f"[sln] initial = {s['initial']!r}: expected taylor-green or random-small")


def _solver_config(cfg: Config, seed: int, cross: bool, **over):
    from stochlag import sln

    g, s = cfg.section("grid"), cfg.section("sln")
    kw = dict(d=g["d"], N=g["N"], L=g["L"], nu=s["nu"], R=s["R"], k=s["k"], alpha=s["alpha"],
              M=s["M"], dt=s["dt"], T=s["T"], window=s["window"], delta_num=s["delta_num"],
              picard_tol=s["picard_tol"], route=s["route"], scheme=s["scheme"],
              recover_every=s["recover_every"], block_size=s["block_size"], seed=seed,
              cross_check=cross)
    kw.update(over)
    try:
        return sln.SolverConfig(**kw)
    except sln.ConfigError as exc:
        raise ConfigError(f"[sln] {exc}") from exc


def run_heat_decay(cfg: Config, out: Path, seed: int, cross: bool, report: dict) -> int:
    from stochlag.flowmap import WienerDriver
    from stochlag.initial import cellular_flow, cosine_mode, gaussian_bump, taylor_green
    from stochlag.norms import HolderParams
    from stochlag.oracle import OracleConfig
    from stochlag.transport import decay_study, window_checksums

    grid = _grid(cfg)
    h = cfg.section("heat")
    drifts = {"cellular": cellular_flow, "taylor-green": taylor_green}
    if h["drift"] == "none":
        from stochlag.fields import zeros

        u = zeros(grid, 1)
    elif h["drift"] in drifts:
        u = drifts[h["drift"]](grid, h["amplitude"])
    else:
        raise ConfigError(f"[heat] drift = {h['drift']!r}: expected cellular, taylor-green or none")
    if h["theta0"] == "bump":
        theta0 = gaussian_bump(grid, [grid.L / 4] * grid.d, grid.L / 12)
    elif h["theta0"] == "cosine":
        theta0 = cosine_mode(grid)
    else:
        raise ConfigError(f"[heat] theta0 = {h['theta0']!r}: expected bump or cosine")
    driver = WienerDriver(seed, h["M"], grid.d) if h["stochastic"] else None
    rep = decay_study(theta0, u, h["nu"], h["times"], params=HolderParams(h["k"], h["alpha"]),
                      eps=h["eps"], oracle_cfg=OracleConfig(dt=h["oracle_dt"]), driver=driver,
                      dt=h["dt"], window=h["window"], pathwise=h["pathwise"])
    csv_path, json_path = rep.write(out)
    report["outputs"] += [csv_path, json_path]
    if driver is not None:
        report["wiener"] = {"seed": seed, "M": h["M"], "windows": window_checksums(
            driver, h["dt"], max(h["times"]), h["window"])}
    finite = all(math.isfinite(v) for v in (rep.c_inf, rep.c_decay, rep.c_growth))
    return EXIT_OK if finite else EXIT_INVARIANT


def run_sln_solve(cfg: Config, out: Path, seed: int, cross: bool, report: dict) -> int:
    from stochlag import sln
    from stochlag.flowmap import INVERSION_TOL, WienerDriver
    from stochlag.io import write_json

    check_viscosity_rule(cfg)
    grid = _grid(cfg)
    u0 = _initial_velocity(cfg, grid)
    scfg = _solver_config(cfg, seed, cross)
    snap_dir = out / "snapshots"
    try:
        trace = sln.solve(u0, scfg, snapshot_dir=snap_dir,
                          snapshot_times=cfg.section("sln")["snapshot_times"])
    except sln.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    csv_path = trace.write_csv(out / "sln_trace.csv")
    div_ok = bool(max(trace.column("div_residual")) <= sln.DIV_TOL)
    disc, dtol = trace.column("route_discrepancy"), trace.column("route_tol")
    checked = ~(disc != disc)
    route_ok = bool((disc[checked] <= dtol[checked]).all()) if checked.any() else True
    inv_ok = bool(max(trace.column("inversion_residual")) <= INVERSION_TOL)
    summary = {"nu": trace.nu, "U": trace.U, "window": trace.window,
               "windows": len(trace.windows), "t_min": trace.t_min if scfg.record_holder else None,
               "divergence_ok": div_ok, "route_equivalence_ok": route_ok,
               "inversion_ok": inv_ok,
               "route_checked_windows": int(checked.sum())}
    report["outputs"] += [csv_path, write_json(out / "sln_summary.json", summary)]
    report["outputs"] += sorted(snap_dir.glob("*.bin")) if snap_dir.exists() else []
    base = WienerDriver(seed, scfg.M, grid.d)
    steps = [max(1, int(math.ceil((w.t_end - w.t_start) / scfg.dt - 1e-9))) for w in trace.windows]
    report["wiener"] = {"seed": seed, "M": scfg.M, "windows": [
        {"window": w.driver_window, "steps": n,
         "checksum": base.for_window(w.driver_window).checksum(n)}
        for w, n in zip(trace.windows, steps)]}
    return EXIT_OK if div_ok and route_ok and inv_ok else EXIT_INVARIANT


def run_sweep(cfg: Config, out: Path, seed: int, cross: bool, report: dict) -> int:
    from stochlag import sln
    from stochlag.io import write_json

    grid = _grid(cfg)
    sw = cfg.section("sweep")
    u0 = _initial_velocity(cfg, grid)
    scfg = _solver_config(cfg, seed, cross, nu=None, R=1.0, M=sw["M"], T=sw["T"],
                          recover_every=sw["recover_every"])
    try:
        exp = sln.norm_decay_experiment(u0, sw["R_values"], scfg, eps=sw["eps"])
    except (sln.WindowCollapse, RuntimeError) as exc:
        print(f"guard violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    report["outputs"] += [exp.write_csv(out / "norm_decay_sweep.csv"),
                          write_json(out / "norm_decay_summary.json", exp.summary())]
    for R, tr in exp.traces.items():
        report["outputs"].append(tr.write_csv(out / f"trace_R{R:g}.csv"))
    return EXIT_OK


def validation_suite(cfg: Config, seed: int) -> list:
    """Invariant checks on small default problems; returns :class:`Check` rows."""
    import numpy as np

    from stochlag import sln
    from stochlag.checks import Check, at_most
    from stochlag.fields import (
        PeriodicGrid, biot_savart, curl, gradient, leray_project, random_smooth,
        random_solenoidal,
    )
    from stochlag.flowmap import (
        WienerDriver, c0_norm, grad_lambda, gronwall_bound, integrate_flow, invert_flow,
    )
    from stochlag.initial import cellular_flow, cosine_mode, taylor_green
    from stochlag.oracle import OracleConfig
    from stochlag.transport import heat_structure_checks

    M = cfg.section("validate")["M"]
    rng = np.random.default_rng(seed)
    checks = []
    g = PeriodicGrid(2, 32)
    v = random_smooth(g, rng, rank=1, kmax=6)
    pv = leray_project(v)
    n = max(v.norm_l2(), 1e-300)
    checks.append(at_most("Leray projection idempotent", (leray_project(pv) - pv).norm_l2() / n,
                          1e-9))
    phi = random_smooth(g, rng, rank=0, kmax=6)
    gp = gradient(phi)
    checks.append(at_most("Leray projection kills gradients",
                          leray_project(gp).norm_l2() / gp.norm_l2(), 1e-9))
    w = random_solenoidal(g, rng, kmax=6)
    checks.append(at_most("Biot-Savart / curl round trip",
                          (biot_savart(curl(w)) - w).norm_l2() / w.norm_l2(), 1e-9))
    heat = heat_structure_checks(cosine_mode(g), cellular_flow(g), 0.05, 0.25,
                                 oracle_cfg=OracleConfig(dt=1e-3),
                                 driver=WienerDriver(seed, M, 2), dt=0.05)
    checks += heat
    u = taylor_green(g)
    dt = 0.02
    st = integrate_flow(u, 0.0, WienerDriver(seed, 1, 2), dt, 0.2)
    invert_flow(st)
    checks.append(at_most("inversion residual |X o A - I|_inf / L",
                          st.inversion_residual / g.L, 1e-10))
    grad_u = float(np.sqrt(np.sum(gradient(u).values**2, axis=(0, 1))).max())
    bound = gronwall_bound(grad_u * g.L, st.t, g.L, dt)
    checks.append(at_most("Gronwall |grad lambda|_C0 / envelope",
                          float(c0_norm(grad_lambda(st), g).max()) / bound, 1.0))
    scfg = _solver_config(cfg, seed, True, d=2, N=32, L=g.L, nu=0.5, R=None, M=M, T=0.01,
                          record_holder=False)
    tr = sln.solve(u, scfg)
    checks.append(at_most("sln divergence residual", max(tr.column("div_residual")), sln.DIV_TOL))
    disc, dtol = tr.column("route_discrepancy")[1:], tr.column("route_tol")[1:]
    checks.append(Check("sln route equivalence (max discrepancy / tolerance)",
                        float((disc / dtol).max()), 1.0, bool((disc <= dtol).all())))
    exact = u.norm_l2() * np.exp(-2 * 0.5 * tr.t)
    se = tr.column("l2_stderr")
    err = np.abs(tr.l2 - exact) / exact
    tol = np.maximum(3 * se / exact, 0.02)
    checks.append(Check("sln Taylor-Green |u|_2 vs exp(-2 nu t) (max err / tol)",
                        float((err / tol).max()), 1.0, bool((err <= tol).all())))
    checks.append(at_most("sln stochastic energy nonincreasing within 3 stderr",
                          float(max(0.0, (np.diff(tr.l2) - 3 * se[1:]).max())), 0.0))
    return checks


def run_validate(cfg: Config, out: Path, seed: int, cross: bool, report: dict) -> int:
    from stochlag.io import write_table

    checks = validation_suite(cfg, seed)
    for c in checks:
        print(c.line())
    path = write_table(out / "validate.csv", ["check", "value", "tolerance", "status"],
                       ["invariant name", "measured value", "tolerance", "pass or FAIL"],
                       [[c.name, c.value, c.tolerance, c.status] for c in checks])
    report["outputs"].append(path)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_INVARIANT


RUNNERS = {
    "heat-decay": run_heat_decay,
    "sln-solve": run_sln_solve,
    "norm-decay-sweep": run_sweep,
    "validate": run_validate,
}


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochlag", description=__doc__.splitlines()[0] if __doc__
                                else None)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="INI config file, or a run manifest (JSON) to replay")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<run id>)")
    p.add_argument("--seed-override", type=int, help="replace [run] seed")
    p.add_argument("--threads", type=int, help="numba worker threads")
    p.add_argument("--cross-check-routes", action="store_true",
                   help="evaluate both velocity-recovery routes on every window")
    return p


def _load_config_text(path: str | None) -> tuple[str, str, dict]:
    """Config text, its source label, and the replayed manifest (empty for INI input)."""
    if path is None:
        return DEFAULT_CONFIG, "<default>", {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if p.suffix == ".json":
        try:
            manifest = json.loads(text)
            return manifest["config_text"], str(p), manifest
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
    return text, str(p), {}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        os.environ["NUMBA_NUM_THREADS"] = str(args.threads)
    try:
        text, source, replayed = _load_config_text(args.config)
        cfg = parse_config(text, source)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from stochlag.io import content_hash, write_json

    seed = args.seed_override if args.seed_override is not None else replayed.get(
        "seed", cfg.section("run")["seed"])
    if replayed.get("cross_check_routes"):
        args.cross_check_routes = True
    run_hash = content_hash(args.subcommand, text, str(seed), str(bool(args.cross_check_routes)))
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
    out = Path(args.out) if args.out else root / f"{args.subcommand}-{run_hash[:10]}"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = {"outputs": []}
    started = _now()
    from stochlag.flowmap import FlowError, InversionError
    from stochlag.oracle import CFLError
    from stochlag.sln import ConfigError as SolverConfigError
    from stochlag.sln import PicardError, WindowCollapse

    try:
        status = RUNNERS[args.subcommand](cfg, out, seed, args.cross_check_routes, report)
    except (ConfigError, SolverConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InversionError, FlowError, CFLError, PicardError, WindowCollapse) as exc:
        print(f"guard violation: {exc}", file=sys.stderr)
        report["error"] = str(exc)
        status = EXIT_INVARIANT
    manifest = {
        "subcommand": args.subcommand,
        "config_text": text,
        "config_source": source,
        "config": {k: v for k, v in cfg.values.items() if not k.startswith("_")},
        "seed": seed,
        "cross_check_routes": bool(args.cross_check_routes),
        "input_hash": run_hash,
        "started": started,
        "finished": _now(),
        "exit_status": status,
        "error": report.get("error"),
        "environment": environment_fingerprint(),
        "wiener": report.get("wiener"),
        "outputs": [
            {"path": str(Path(p).relative_to(out)), "sha1": _sha1_file(Path(p)),
             "bytes": Path(p).stat().st_size}
            for p in report["outputs"]
        ],
    }
    write_json(out / "manifest.json", manifest)
    print(f"{args.subcommand}: exit {status}; outputs in {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
