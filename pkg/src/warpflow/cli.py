"""Command line front end: ``warpflow <subcommand> [options]``.

Exit codes: 0 ok, 1 configuration error, 2 numerical failure, 3 missing
input artifact, 4 internal error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING, EXIT_INTERNAL = 0, 1, 2, 3, 4

DEFAULTS = {
    "bohm": {
        "n1": 2, "n2": 2, "c": 1.0, "x_start": 1e-3, "L": 200.0,
        "rk_tol": 1e-10, "series_order": 8, "n_grid": 2048,
    },
    "spectral": {"modes": 4, "method": "shift-invert", "convergence_study": True},
    "flow": {
        "eps": 1e-3, "mode": 0, "t_final": 10.0, "snapshot_dt": 0.5,
        "cfl": 0.2, "stability": 2.0, "blowup": 2.0,
    },
    "manifold": {
        "map": "quadratic", "samples": [0.1, -0.1, 0.05, -0.05], "depth": 30,
        "damping": 0.5, "tol": 1e-13,
        "flow_modes": 4, "flow_dt": 2.0, "flow_L": 60.0, "flow_n_grid": 256, "flow_v": 1e-3,
        "flow_depth": 12, "flow_damping": 1.0,
    },
    "output_dir": "out",
}


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        if not math.isfinite(out):
            raise ConfigError(f"{path}: must be finite")
        return out
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: list entries must be numbers") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported option type")


def merge_config(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    if not isinstance(update, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(base[key], dict):
            out[key] = merge_config(base[key], value, path + ".")
        else:
            out[key] = _coerce(path, base[key], value)
    return out


def load_config(path: str | None, overrides: list[tuple[str, str]]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        cfg = merge_config(cfg, user)
    for dotted, value in overrides:
        parts = dotted.split(".")
        node: dict = {}
        cur = node
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = value
        cfg = merge_config(cfg, node)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    b = cfg["bohm"]
    for key in ("n1", "n2"):
        if b[key] < 2:
            raise ConfigError(f"{key} must be ≥ 2")
    if b["n_grid"] < 16:
        raise ConfigError("bohm.n_grid: must be at least 16")
    if not 0 < b["x_start"] < 0.1:
        raise ConfigError("bohm.x_start: must lie in (0, 0.1)")
    if b["L"] < 1:
        raise ConfigError("bohm.L: must be at least 1")
    if b["rk_tol"] <= 0 or b["c"] <= 0:
        raise ConfigError("bohm.rk_tol and bohm.c must be positive")
    s = cfg["spectral"]
    if s["modes"] < 1:
        raise ConfigError("spectral.modes: must be at least 1")
    if s["method"] not in ("shift-invert", "banded", "dense"):
        raise ConfigError("spectral.method: choose shift-invert, banded or dense")
    f = cfg["flow"]
    if f["t_final"] <= 0 or f["snapshot_dt"] <= 0:
        raise ConfigError("flow.t_final and flow.snapshot_dt must be positive")
    if f["mode"] < 0:
        raise ConfigError("flow.mode: must be non-negative")
    m = cfg["manifold"]
    from .manifold import TOY_MAPS
    if m["map"] not in set(TOY_MAPS) | {"flow"}:
        raise ConfigError(f"manifold.map: choose one of {sorted(TOY_MAPS) + ['flow']}")
    if not 0 < m["damping"] <= 1:
        raise ConfigError("manifold.damping: must lie in (0, 1]")
    if m["depth"] < 1:
        raise ConfigError("manifold.depth: must be at least 1")
    if not 0 < m["flow_damping"] <= 1:
        raise ConfigError("manifold.flow_damping: must lie in (0, 1]")
    if m["flow_depth"] < 1:
        raise ConfigError("manifold.flow_depth: must be at least 1")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _threads() -> int:
    raw = os.environ.get("WARPFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"WARPFLOW_THREADS: expected an integer, got {raw!r}") from None


def _pool_map(fn, items):
    items = list(items)
    n = min(_threads(), len(items)) or 1
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# artifacts


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out: str, command: str, cfg: dict, tolerances: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "versions": {
            "warpflow": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "tolerances": tolerances,
    }
    manifest.update(extra or {})
    write_json(os.path.join(out, "manifest.json"), manifest)


def _bohm_options(cfg: dict, **over):
    from .bohm import BohmOptions
    b = dict(cfg["bohm"])
    b.update(over)
    return BohmOptions(**b)


def _load_profile(out: str):
    from .geometry import load_profile
    csv_path = os.path.join(out, "profile.csv")
    json_path = os.path.join(out, "profile.json")
    if not (os.path.exists(csv_path) and os.path.exists(json_path)):
        raise MissingArtifact(f"{csv_path}: profile artifact missing; run build-metric first")
    return load_profile(csv_path, json_path)


# ---------------------------------------------------------------------------
# commands


def cmd_build_metric(cfg: dict) -> int:
    from .bohm import ProfileCollapse, cone_fit, constraint_residual, integrate_bohm
    from .geometry import save_profile
    import warnings

    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    opts = _bohm_options(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            profile = integrate_bohm(opts)
        except ProfileCollapse as exc:
            raise NumericalFailure(str(exc)) from exc
    fit = cone_fit(profile)
    save_profile(profile, os.path.join(out, "profile.csv"), os.path.join(out, "profile.json"))
    report = fit.to_dict()
    report["max_constraint_residual"] = float(np.max(constraint_residual(profile)))
    write_json(os.path.join(out, "cone_fit.json"), report)
    notes = sorted({str(w.message) for w in caught})
    write_manifest(out, "build-metric", cfg, {"rk_tol": opts.rk_tol, "constraint": 1e-6, "cone_slope_rel": 0.01},
                   {"warnings": notes})
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    print(f"profile written to {out} (cone slopes {fit.c1_hat:.6f}, {fit.c2_hat:.6f})")
    return EXIT_OK


def _spectrum_for(profile, k: int, method: str):
    from .spectral import assemble_ode_operator, compute_spectrum, discretize
    problem = discretize(assemble_ode_operator(profile))
    return problem, compute_spectrum(problem, k, method=method)


def cmd_spectrum(cfg: dict) -> int:
    from .bohm import integrate_bohm
    from .spectral import spectrum_report

    out = cfg["output_dir"]
    profile = _load_profile(out)
    k = cfg["spectral"]["modes"]
    method = cfg["spectral"]["method"]
    problem, pairs = _spectrum_for(profile, k, method)
    report = spectrum_report(pairs)
    report["n_positive"] = int(sum(p.lam > 0 for p in pairs))
    write_json(os.path.join(out, "spectrum.json"), report)
    for j, p in enumerate(pairs):
        h = p.tensor
        np.savetxt(os.path.join(out, f"eigentensor_{j}.csv"),
                   np.column_stack([h.grid, h.eta0, h.eta1, h.eta2]),
                   delimiter=",", header="x,eta0,eta1,eta2", comments="", fmt="%.17g")
    if cfg["spectral"]["convergence_study"]:
        b = cfg["bohm"]
        runs = [("base", b["L"], b["n_grid"]), ("L_doubled", 2 * b["L"], 2 * b["n_grid"]),
                ("grid_doubled", b["L"], 2 * b["n_grid"])]

        def one(run):
            name, L, N = run
            if name == "base":
                return name, L, N, [p.lam for p in pairs]
            prof = integrate_bohm(_bohm_options(cfg, L=L, n_grid=N))
            return name, L, N, [p.lam for p in _spectrum_for(prof, k, method)[1]]

        rows = _pool_map(one, runs)
        base = np.array(rows[0][3])
        table = []
        for name, L, N, lams in rows:
            lams = np.array(lams)
            rel = np.abs(lams - base) / np.maximum(np.abs(base), 1e-300)
            table.append({"run": name, "L": L, "n_grid": N, "lambdas": lams, "rel_change": rel})
        write_json(os.path.join(out, "convergence.json"), {"runs": table})
    write_manifest(out, "spectrum", cfg, {"stability_rel": 1e-3, "gap_rel": 1e-3, "decay_r2": 0.99})
    print("lambdas: " + ", ".join(f"{p.lam:.8g}" for p in pairs))
    return EXIT_OK


def cmd_flow(cfg: dict) -> int:
    from .flow import FlowModel, FlowOptions, PositivityError, evolve, perturb_metric, write_trajectory, \
        growth_rate, linear_window

    out = cfg["output_dir"]
    profile = _load_profile(out)
    f = cfg["flow"]
    model = FlowModel(profile)
    from .spectral import compute_spectrum
    pairs = compute_spectrum(model.problem, f["mode"] + 1)
    if f["mode"] >= len(pairs):
        raise ConfigError(f"flow.mode: only {len(pairs)} modes available")
    try:
        state = perturb_metric(profile, pairs[f["mode"]].tensor, f["eps"],
                               {"mode": f["mode"], "lambda": pairs[f["mode"]].lam})
    except PositivityError as exc:
        raise NumericalFailure(str(exc)) from exc
    opts = FlowOptions(cfl=f["cfl"], stability=f["stability"], snapshot_dt=f["snapshot_dt"], blowup=f["blowup"])
    traj = evolve(state, f["t_final"], opts, model=model)
    flow_dir = os.path.join(out, "flow")
    report = write_trajectory(traj, flow_dir, {"lambda": pairs[f["mode"]].lam, "mode": f["mode"], "eps": f["eps"]})
    zc = traj.zero_counts
    monotone = all(b <= a for a, b in zip(zc, zc[1:]))
    write_manifest(out, "flow", cfg, {"tol_band": traj.tol_band, "dt": traj.dt, "linear_regime": 0.1},
                   {"zero_counts": zc, "zero_counts_nonincreasing": monotone,
                    "rate_estimate": report["rate_estimate"], "status": traj.status})
    print(f"flow {traj.status}: t = {traj.times[-1]:.4g}, zero counts {zc[0]} -> {zc[-1]}, "
          f"rate {report['rate_estimate']}")
    if traj.status == "nan":
        raise NumericalFailure(traj.message)
    return EXIT_OK


def cmd_manifold(cfg: dict) -> int:
    from .manifold import (
        NonContraction, fit_graph_coefficient, orbit_report, shadowing_defects, solve_ancient_orbit,
        toy_problem, truncate_flow_map,
    )

    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    m = cfg["manifold"]
    kw = {"depth": m["depth"], "damping": m["damping"], "tol": m["tol"]}
    try:
        if m["map"] == "flow":
            from .bohm import integrate_bohm
            from .flow import FlowModel
            from .spectral import compute_spectrum
            prof = integrate_bohm(_bohm_options(cfg, L=m["flow_L"], n_grid=m["flow_n_grid"]))
            model = FlowModel(prof)
            pairs = compute_spectrum(model.problem, m["flow_modes"])
            problem = truncate_flow_map(model, pairs, m["flow_modes"], m["flow_dt"])
            v = np.full(problem.dim_u, m["flow_v"] / math.sqrt(problem.dim_u))
            orbit = solve_ancient_orbit(problem, v, depth=m["flow_depth"], damping=m["flow_damping"],
                                        tol=m["tol"], point_floor=1e-8)
            defects = shadowing_defects(problem, orbit)
            rep = orbit_report(orbit)
            rep.update({"shadowing_defects": defects, "a": problem.a,
                        "multipliers_s": np.diag(problem.T_s), "multipliers_u": np.diag(problem.T_u)})
            write_json(os.path.join(out, "orbit_flow.json"), rep)
            summary = {"map": "flow", "max_shadowing_defect": float(defects.max()),
                       "residual": orbit.residual, "contraction": orbit.contraction}
        else:
            problem = toy_problem(m["map"])
            orbits = _pool_map(lambda s: solve_ancient_orbit(problem, np.full(problem.dim_u, s), **kw), m["samples"])
            for j, o in enumerate(orbits):
                write_json(os.path.join(out, f"orbit_{j}.json"), orbit_report(o))
            pairs = [(o.v, o.x0) for o in orbits]
            summary = {
                "map": m["map"],
                "graph": [{"v": o.v, "x0": o.x0, "residual": o.residual, "contraction": o.contraction}
                          for o in orbits],
            }
            if problem.dim_s == 1 and problem.dim_u == 1:
                c = fit_graph_coefficient(pairs)
                summary["graph_coefficient"] = c
                if m["map"] == "quadratic":
                    summary["reference"] = 2.0 / 7.0
                    summary["coefficient_error"] = abs(c - 2.0 / 7.0)
    except NonContraction as exc:
        raise NumericalFailure(f"{exc} (contraction factor {exc.contraction:.3g})") from exc
    write_json(os.path.join(out, "manifold.json"), summary)
    write_manifest(out, "manifold", cfg, {"tol": m["tol"], "truncation": 1e-14, "shadowing": 0.05})
    if "graph_coefficient" in summary:
        print(f"graph coefficient {summary['graph_coefficient']:.10f}")
    else:
        print(json.dumps(_clean(summary), sort_keys=True))
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .verify import run_checks

    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    results = run_checks()
    for r in results:
        print(f"[{'PASS' if r['passed'] else 'FAIL'}] {r['name']}: {r['detail']}")
    write_json(os.path.join(out, "verify.json"), {"checks": results})
    write_manifest(out, "verify", cfg, {r["name"]: r["tolerance"] for r in results})
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_NUMERIC


COMMANDS = {
    "build-metric": cmd_build_metric,
    "spectrum": cmd_spectrum,
    "flow": cmd_flow,
    "manifold": cmd_manifold,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpflow", description="Böhm metrics, Lichnerowicz spectra, "
                                     "reduced Ricci-DeTurck flow and ancient orbits.")
    parser.add_argument("--version", action="version", version=f"warpflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("-o", "--output-dir", dest="output_dir")
        if name == "build-metric":
            p.add_argument("--n1", type=str)
            p.add_argument("--n2", type=str)
            p.add_argument("--L", type=str)
            p.add_argument("--n-grid", dest="n_grid", type=str)
        elif name == "spectrum":
            p.add_argument("--modes", type=str)
        elif name == "flow":
            p.add_argument("--eps", type=str)
            p.add_argument("--mode", type=str)
            p.add_argument("--t-final", dest="t_final", type=str)
        elif name == "manifold":
            p.add_argument("--map", type=str)
    return parser


_SHORTCUTS = {
    "n1": "bohm.n1", "n2": "bohm.n2", "L": "bohm.L", "n_grid": "bohm.n_grid",
    "modes": "spectral.modes", "eps": "flow.eps", "mode": "flow.mode", "t_final": "flow.t_final",
    "map": "manifold.map",
}


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"{tok}: unrecognized argument (use --section.key=value)")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
        else:
            key = tok[2:]
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"{tok}: missing value") from None
        out.append((key, value))
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        for attr, dotted in _SHORTCUTS.items():
            val = getattr(args, attr, None)
            if val is not None:
                overrides.append((dotted, val))
        if args.output_dir is not None:
            overrides.append(("output_dir", args.output_dir))
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
