"""Configuration-driven runner.

A run is described by an INI file::

    [run]
    command = app2
    seed = 7

    [parameters]
    delta = 0.1

    [numerics]
    n_paths = 10000

    [output]
    directory = out
    formats = json, csv

Every key has a default (``delaysmp defaults COMMAND`` prints them) and
unknown keys are rejected.  ``DELAYSMP_SEED`` and ``DELAYSMP_OUTPUT_DIR``
override the file; command-line flags override both.

Exit codes: 0 success, 2 configuration error, 3 non-convergence, 4 domain error.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aode import (
    AODEProblem,
    CharacteristicSpec,
    aode_residual,
    characteristic_root,
    exponential_ansatz,
    picard_solve_aode,
)
from .asde import LinearAdjointSpec, asde_contraction_constant, martingale_decomposition_solve, picard_solve_asde
from .bsde import DelayedBSDEProblem, contraction_constant, picard_solve
from .calculus import DelayMeasure, TimeGrid
from .control import Numerics, app1_solve, app2_range_check, app2_solve, app3_solve, fubini_duality_check
from .errors import ConfigurationError, DomainError, NonConvergenceError
from .montecarlo import RegressionBasis, generate_brownian

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_DOMAIN = 0, 2, 3, 4

_APP1 = {"beta": 0.1, "alpha": 1.0, "R": 0.5, "T": 1.0, "xi": "1"}
_APP2 = {"r": 0.05, "mu": 0.09, "sigma": 0.1, "alpha": 0.1, "kappa": 0.5, "delta": 0.1, "L": 1.0, "K": 1.0,
         "rho": 0.02, "R": 0.5, "T": 1.0, "xi": "1"}
_APP3 = {"beta1": 0.1, "beta2": 0.05, "gamma1": 0.2, "gamma2": 0.1, "alpha": 1.0, "R": 1.0, "K": 1.0,
         "delta": 0.1, "T": 1.0, "xi": "W"}

PARAMETER_DEFAULTS: dict[str, dict] = {
    "char-root": {"alpha": 0.1, "r": 0.05, "kappa": 0.5, "delta": 0.1},
    "solve-aode": {"alpha": 0.1, "r": 0.05, "kappa": 0.5, "delta": 0.1, "K": 1.0, "T": 1.0},
    "solve-bsde": {"a_y": 0.5, "a_yd": 0.5, "a_z": 0.3, "a_zd": 0.2, "C": 0.5, "delta": 0.1, "T": 1.0,
                   "xi": "W", "measure": "dirac"},
    "solve-asde": {"a": 0.05, "b": 0.05, "c": 0.4, "e": 0.0, "K": 1.0, "delta": 0.1, "T": 1.0},
    "app1": _APP1,
    "app2": _APP2,
    "app3": _APP3,
    "verify-optimality": {"problem": "app2", **{k: None for k in set(_APP1) | set(_APP2) | set(_APP3)}},
    "fubini-check": {"measure": "lebesgue", "delta": 0.1, "T": 1.0},
}

NUMERICS_DEFAULTS = {
    "dt": 5e-3, "n_paths": 10_000, "degree": 3, "tol": 1e-8, "max_iter": 60, "n_perturbations": 50,
    "magnitudes": "0.02, 0.1, 0.5", "eps": 1e-6, "growth": 1.01, "verify": True, "n_steps": 200,
}
RUN_DEFAULTS = {"command": None, "seed": 0}
OUTPUT_DEFAULTS = {"directory": "delaysmp-out", "formats": "json, csv"}
SECTIONS = {"run": RUN_DEFAULTS, "parameters": None, "numerics": NUMERICS_DEFAULTS, "output": OUTPUT_DEFAULTS}


@dataclass
class RunConfig:
    command: str
    parameters: dict
    numerics: dict
    seed: int = 0
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))

    def resolved(self) -> dict:
        return {"run": {"command": self.command, "seed": self.seed}, "parameters": dict(self.parameters),
                "numerics": dict(self.numerics), "output": dict(self.output)}

    @property
    def formats(self) -> set[str]:
        return {f.strip().lower() for f in str(self.output["formats"]).split(",") if f.strip()}

    def numerics_obj(self) -> Numerics:
        n = self.numerics
        return Numerics(dt=n["dt"], n_paths=n["n_paths"], seed=self.seed, degree=n["degree"], tol=n["tol"],
                        n_perturbations=n["n_perturbations"], magnitudes=tuple(n["magnitudes"]),
                        verify=n["verify"])


def _coerce(value: str, default, key: str):
    text = value.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
    if default is None:
        try:
            return float(text)
        except ValueError:
            return text
    return text


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Strict parse of the INI text; unknown sections or keys raise ``ConfigurationError``."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {source}: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]")
    if not cp.has_option("run", "command"):
        raise ConfigurationError("missing [run] command")
    command = cp.get("run", "command").strip()
    if command not in PARAMETER_DEFAULTS:
        raise ConfigurationError(f"unknown command {command!r}; choose from {sorted(PARAMETER_DEFAULTS)}")

    def section(name, defaults):
        out = dict(defaults)
        if cp.has_section(name):
            for key, val in cp.items(name):
                if key not in defaults:
                    raise ConfigurationError(f"unknown key {key!r} in [{name}]")
                out[key] = _coerce(val, defaults[key], f"[{name}] {key}")
        return out

    run = section("run", RUN_DEFAULTS)
    seed = _coerce(str(run["seed"]), 0, "[run] seed")
    params = section("parameters", PARAMETER_DEFAULTS[command])
    numerics = section("numerics", NUMERICS_DEFAULTS)
    try:
        numerics["magnitudes"] = [float(x) for x in str(numerics["magnitudes"]).split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError("[numerics] magnitudes must be a comma separated list of numbers") from None
    output = section("output", OUTPUT_DEFAULTS)
    cfg = RunConfig(command, params, numerics, seed, output)
    if command == "verify-optimality":
        prob = str(params["problem"])
        if prob not in ("app1", "app2", "app3"):
            raise ConfigurationError(f"verify-optimality problem must be app1, app2 or app3, got {prob!r}")
        base = PARAMETER_DEFAULTS[prob]
        extra = [k for k, v in params.items() if v is not None and k != "problem" and k not in base]
        if extra:
            raise ConfigurationError(f"keys {sorted(extra)} do not apply to {prob}")
        cfg.parameters = {"problem": prob, **base,
                          **{k: v for k, v in params.items() if v is not None and k in base}}
    for key in ("dt", "tol", "eps", "growth"):
        if not numerics[key] > 0:
            raise ConfigurationError(f"[numerics] {key} must be positive")
    for key in ("n_paths", "max_iter", "n_steps"):
        if numerics[key] < 1:
            raise ConfigurationError(f"[numerics] {key} must be >= 1")
    unknown = cfg.formats - {"json", "csv"}
    if unknown:
        raise ConfigurationError(f"unknown output formats {sorted(unknown)}")
    return cfg


def apply_overrides(cfg: RunConfig, seed: int | None = None, output_dir: str | None = None,
                    environ=os.environ) -> RunConfig:
    env_seed = environ.get("DELAYSMP_SEED")
    if env_seed is not None:
        cfg.seed = _coerce(env_seed, 0, "DELAYSMP_SEED")
    env_dir = environ.get("DELAYSMP_OUTPUT_DIR")
    if env_dir:
        cfg.output["directory"] = env_dir
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output["directory"] = output_dir
    return cfg


# ----------------------------------------------------------------------------
# validation


def well_posedness(cfg: RunConfig) -> dict:
    """Contraction constants and parameter-range bounds implied by the declared coefficients.

    Keys present depend on the command: ``K`` (delayed BSDE), ``K_prime``
    (adjoint ASDE, only when ``1/delta > 1``) and for ``app2`` the output of
    :func:`app2_range_check`.  Empty when ``delta = 0``.
    """
    p = cfg.parameters
    cmd = p.get("problem", cfg.command) if cfg.command == "verify-optimality" else cfg.command
    delta = float(p.get("delta", 0.0) or 0.0)
    out: dict = {}
    if delta <= 0:
        return out

    def constants(C, measure, bsde=True, asde=True):
        out["C"] = C
        if bsde:
            out["K"] = contraction_constant(C, 1.0, delta, measure)[0]
        if asde and 1.0 / delta > 1:
            out["K_prime"] = asde_contraction_constant(C, 1.0, delta, DelayMeasure.dirac(delta)).K_prime

    if cmd == "app2":
        lam = (p["mu"] - p["r"]) / p["sigma"] if p["sigma"] > 0 else math.inf
        out["range_check"] = app2_range_check(p["alpha"], p["r"], p["kappa"], lam, delta)
        constants(out["range_check"]["L"], DelayMeasure.dirac(delta))
    elif cmd == "app3":
        constants(max(abs(p[k]) for k in ("beta1", "beta2", "gamma1", "gamma2", "alpha")), DelayMeasure.dirac(delta))
    elif cmd == "solve-bsde":
        constants(p["C"], _measure(p["measure"], delta), asde=False)
    elif cmd == "solve-asde":
        constants(max(abs(p[k]) for k in ("a", "b", "c", "e")), None, bsde=False)
    return out


def validate(cfg: RunConfig) -> list[str]:
    """Warnings for failed well-posedness bounds (contraction constants and parameter ranges)."""
    wp = well_posedness(cfg)
    cmd = cfg.parameters.get("problem", cfg.command) if cfg.command == "verify-optimality" else cfg.command
    warnings: list[str] = []
    rc = wp.get("range_check")
    if rc is not None:
        if not rc["bsde_ok"]:
            warnings.append(f"{cmd}: 6 L^2 delta (1 + 2 delta^2 e) = {rc['bsde_bound']:.6g} >= 1 (L = {rc['L']:.6g})")
        if not rc["asde_ok"]:
            warnings.append(f"{cmd}: 4 L^2 delta (1 + delta^2 e) + delta = {rc['asde_bound']:.6g} >= 1 "
                            f"(L = {rc['L']:.6g})")
    if wp.get("K", 0.0) >= 1:
        warnings.append(f"{cmd}: delayed BSDE contraction constant K = {wp['K']:.6g} >= 1")
    if wp.get("K_prime", 0.0) >= 1:
        warnings.append(f"{cmd}: adjoint ASDE contraction constant K' = {wp['K_prime']:.6g} >= 1")
    return warnings


def _measure(kind: str, delta: float) -> DelayMeasure | None:
    if delta <= 0:
        return None
    kind = str(kind).lower()
    if kind == "dirac":
        return DelayMeasure.dirac(delta)
    if kind == "lebesgue":
        return DelayMeasure.lebesgue(delta)
    raise ConfigurationError(f"unknown measure {kind!r} (dirac or lebesgue)")


# ----------------------------------------------------------------------------
# commands


def _cmd_char_root(cfg):
    p = cfg.parameters
    spec = CharacteristicSpec(p["alpha"], p["r"], p["kappa"], p["delta"])
    h = characteristic_root(spec)
    return {"h": h, "F_h": float(spec.F(h)), "growth": spec.growth, "weight": spec.weight}, {}


def _cmd_solve_aode(cfg):
    p = cfg.parameters
    spec = CharacteristicSpec(p["alpha"], p["r"], p["kappa"], p["delta"])
    grid, delta = TimeGrid.for_delay(p["T"], p["delta"], cfg.numerics["dt"], before=False, after=True)
    prob = AODEProblem(spec.growth, -spec.weight, delta, p["K"], p["T"])
    h = characteristic_root(spec)
    qa = exponential_ansatz(spec, p["K"], p["T"], grid, h)
    qp = picard_solve_aode(prob, grid, tol=min(cfg.numerics["tol"], 1e-12), max_iter=cfg.numerics["max_iter"] * 4)
    t = grid.nodes
    body = t <= p["T"] - delta + grid._tol(p["T"])
    ra = aode_residual(qa, prob, grid)
    rp = aode_residual(qp, prob, grid)
    results = {"h": h, "delta": delta, "sup_ansatz_vs_picard_0_T_minus_delta": float(np.max(np.abs(
        qa.values - qp.values)[body])), "ansatz_residual": ra.as_dict(), "picard_residual": rp.as_dict()}
    return results, {"aode": (("t", "q_ansatz", "q_picard"), np.column_stack([t, qa.values, qp.values]))}


def _cmd_solve_bsde(cfg):
    p, n = cfg.parameters, cfg.numerics
    grid, delta = TimeGrid.for_delay(p["T"], p["delta"], n["dt"], before=True)
    measure = _measure(p["measure"], delta)
    ay, ayd, az, azd = p["a_y"], p["a_yd"], p["a_z"], p["a_zd"]
    from .control.applications import _terminal

    prob = DelayedBSDEProblem(
        generator=lambda t, y, yd, z, zd: ay * y + ayd * yd + az * z + azd * zd, terminal=_terminal(p["xi"]),
        T=p["T"], delay=delta, measure=measure, lipschitz_C=p["C"], name="linear")
    ens = generate_brownian(grid, n["n_paths"], 1, cfg.seed)
    sol, rep = picard_solve(prob, grid, ens, RegressionBasis(n["degree"]), n["tol"], n["max_iter"])
    i0 = sol.i0
    t = grid.nodes[i0:]
    y = sol.y.values[:, i0:, 0]
    z = sol.z.values[:, i0:, 0]
    results = {"y0": float(sol.y0_mean()[0]), "picard": rep.as_dict(), "delta": delta}
    return results, {"bsde": (("t", "y_mean", "z_mean"), np.column_stack([t, y.mean(0), z.mean(0)]))}


def _cmd_solve_asde(cfg):
    p, n = cfg.parameters, cfg.numerics
    grid, delta = TimeGrid.for_delay(p["T"], p["delta"], n["dt"], before=False, after=True)
    spec = LinearAdjointSpec(p["a"], p["b"], p["c"], p["e"], p["K"], delta, p["T"])
    ens = generate_brownian(grid, n["n_paths"], 1, cfg.seed)
    sol, rep = picard_solve_asde(spec.asde_problem(), grid, ens, RegressionBasis(n["degree"]), n["tol"],
                                 n["max_iter"])
    ref = martingale_decomposition_solve(spec, ens)
    rms = np.sqrt(np.mean((sol.x.values - ref.x.values) ** 2, axis=0))[:, 0]
    results = {"picard": rep.as_dict(), "delta": delta, "max_nodal_rms_vs_qM": float(rms.max())}
    if delta > 0 and 1 / delta > 1:
        C = max(abs(p[k]) for k in ("a", "b", "c", "e"))
        kc = asde_contraction_constant(C, 1.0, delta, DelayMeasure.dirac(delta))
        results["K_prime"] = kc.K_prime
        results["K_prime_bound"] = kc.bound_form
    t = grid.nodes
    table = np.column_stack([t, sol.x.values[:, :, 0].mean(0), ref.x.values[:, :, 0].mean(0), rms])
    return results, {"asde": (("t", "p_picard_mean", "p_qM_mean", "rms_diff"), table)}


def _run_app(name, params, cfg, verify=None):
    num = cfg.numerics_obj()
    if verify is not None:
        num.verify = verify
    params = dict(params)
    if name == "app1":
        res = app1_solve(**params, eps=cfg.numerics["eps"], growth=cfg.numerics["growth"],
                         numerics=num)
    elif name == "app2":
        res = app2_solve(**params, numerics=num)
    else:
        res = app3_solve(**params, numerics=num)
    return res.as_dict(), res.tables


def _cmd_app(name):
    return lambda cfg: _run_app(name, cfg.parameters, cfg)


def _cmd_verify(cfg):
    params = dict(cfg.parameters)
    prob = params.pop("problem")
    results, tables = _run_app(prob, params, cfg, verify=True)
    return {"problem": prob, "optimality": results["optimality"], "J": results["J"],
            "max_condition_residual": results["max_condition_residual"]}, tables


def _cmd_fubini(cfg):
    p, n = cfg.parameters, cfg.numerics
    T = p["T"]
    grid, delta = TimeGrid.for_delay(T, p["delta"], T / n["n_steps"], before=True)
    measure = _measure(p["measure"], delta)
    if measure is None:
        raise ConfigurationError("fubini-check needs delta > 0")
    ens = generate_brownian(grid, n["n_paths"], 1, cfg.seed)
    W = ens.cumulative[:, :, 0]
    t = grid.nodes
    H = np.sin(W + t)[:, :, None]
    u = np.zeros_like(H)
    v = np.where(t >= 0, np.tanh(W) + np.cos(3 * t), 0.0)[:, :, None]
    res = fubini_duality_check(H, u, v, measure, None, grid, T)
    return {"lhs": res.lhs, "rhs": res.rhs, "defect": res.defect, "measure": measure.kind.value}, {}


COMMANDS = {
    "char-root": _cmd_char_root,
    "solve-aode": _cmd_solve_aode,
    "solve-bsde": _cmd_solve_bsde,
    "solve-asde": _cmd_solve_asde,
    "app1": _cmd_app("app1"),
    "app2": _cmd_app("app2"),
    "app3": _cmd_app("app3"),
    "verify-optimality": _cmd_verify,
    "fubini-check": _cmd_fubini,
}


# ----------------------------------------------------------------------------
# output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(columns, rows: np.ndarray) -> str:
    lines = [",".join(columns)]
    for row in np.atleast_2d(rows):
        lines.append(",".join("nan" if not np.isfinite(x) else format(float(x), ".17g") for x in row))
    return "\n".join(lines) + "\n"


def write_report(cfg: RunConfig, payload: dict, tables: dict) -> Path:
    out = Path(cfg.output["directory"])
    report = {"config": cfg.resolved(), "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(), **payload}
    _atomic_write(out / "report.json", json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")
    if "csv" in cfg.formats:
        for name, (cols, rows) in tables.items():
            _atomic_write(out / f"{name}.csv", _csv_text(cols, rows))
    return out / "report.json"


def run(cfg: RunConfig) -> int:
    """Execute the configured pipeline, write the report and return the exit status."""
    warnings = validate(cfg)
    for w in warnings:
        logger.warning(w)
    category, status = None, EXIT_OK
    tables: dict = {}
    try:
        results, tables = COMMANDS[cfg.command](cfg)
        payload = {"status": "ok", "results": results}
    except ConfigurationError as exc:
        category, status, payload = "config", EXIT_CONFIG, {"status": "error", "message": str(exc)}
    except NonConvergenceError as exc:
        category, status = "nonconvergence", EXIT_NONCONVERGENCE
        payload = {"status": "error", "message": str(exc), "history": list(exc.history)}
    except DomainError as exc:
        category, status, payload = "domain", EXIT_DOMAIN, {"status": "error", "message": str(exc)}
    payload["warnings"] = warnings
    payload["well_posedness"] = well_posedness(cfg)
    payload["command"] = cfg.command
    if category:
        payload["error_category"] = category
        logger.error("%s failed (%s): %s", cfg.command, category, payload["message"])
    if "json" in cfg.formats or category:
        write_report(cfg, payload, tables if not category else {})
    elif "csv" in cfg.formats:
        out = Path(cfg.output["directory"])
        for name, (cols, rows) in tables.items():
            _atomic_write(out / f"{name}.csv", _csv_text(cols, rows))
    return status


def default_config_text(command: str) -> str:
    if command not in PARAMETER_DEFAULTS:
        raise ConfigurationError(f"unknown command {command!r}")
    lines = ["[run]", f"command = {command}", f"seed = {RUN_DEFAULTS['seed']}", "", "[parameters]"]
    for k, v in PARAMETER_DEFAULTS[command].items():
        if v is not None:
            lines.append(f"{k} = {v}")
    lines += ["", "[numerics]"] + [f"{k} = {v}" for k, v in NUMERICS_DEFAULTS.items()]
    lines += ["", "[output]"] + [f"{k} = {v}" for k, v in OUTPUT_DEFAULTS.items()]
    return "\n".join(lines) + "\n"


def _load(path: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    return parse_config(text, source=path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delaysmp", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="run the pipeline described by a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    v = sub.add_parser("validate", help="print well-posedness warnings for a config")
    v.add_argument("config")
    d = sub.add_parser("defaults", help="print a config with every default for a command")
    d.add_argument("command", choices=sorted(PARAMETER_DEFAULTS))
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.action == "defaults":
            sys.stdout.write(default_config_text(args.command))
            return EXIT_OK
        cfg = _load(args.config)
        if args.action == "validate":
            cfg = apply_overrides(cfg)
            for w in validate(cfg):
                print(w)
            return EXIT_OK
        cfg = apply_overrides(cfg, args.seed, args.output_dir)
    except ConfigurationError as exc:
        print(json.dumps({"status": "error", "error_category": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
