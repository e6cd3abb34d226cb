"""Command-line driver: one study per invocation, driven by a JSON config.

    kraichnan-lab <study> --config <path> [--out <dir>] [--threads <n>] [--seed <u64>]

Artifacts are assembled in a scratch directory beside the target and moved
into place only when the study finishes; on failure the target holds just
``manifest.json`` with the error. See docs/cli.md for the config schema.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coefficients import AssumptionError, ModelSpec, audit_assumption, build
from .krylov import StiffnessError
from .lattice import enumerate_lattice
from .master import assemble, integrate
from .montecarlo import StabilityError, empirical_second_moments, simulate, write_snapshot_csv
from .poincare import batch_verify, write_batch_csv, write_witnesses
from .spectra import (
    SigmaWeight,
    SolverError,
    annulus_report,
    annulus_slope,
    dissipation_scale,
    fit_decay_rate,
    invariant_spectrum,
    regularization_integral,
    stationary_balance,
)

STUDIES = ("decay", "smoothing", "invariant", "annuli", "poincare", "mc-validate")
CONFIG_VERSION = 1
THREADS_ENV = "KRAICHNAN_LAB_THREADS"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_AUDIT = 2
EXIT_NUMERICAL = 3
EXIT_CERTIFICATE = 4

_vec = {"type": "array", "items": {"type": "integer"}, "minItems": 2}
_nums = {"type": "array", "items": {"type": "number"}, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model", "lattice"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "study": {"enum": list(STUDIES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "model": {
            "type": "object",
            "required": ["d", "alpha", "J"],
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["isotropic", "shear", "custom"]},
                "d": {"type": "integer", "minimum": 2},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "J": {"type": "integer", "minimum": 1},
                "J_Z": {"type": "integer", "minimum": 1},
                "custom_table": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "literal_plane_support": {"type": "boolean"},
                "tail_correction": {"type": "boolean"},
            },
        },
        "lattice": {
            "type": "object",
            "required": ["N"],
            "additionalProperties": False,
            "properties": {"N": {"type": "integer", "minimum": 1}},
        },
        "kappa": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "initial": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["kind", "k"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "mode"},
                        "k": _vec,
                        "amplitude": {"type": "number", "exclusiveMinimum": 0},
                        "symmetric": {"type": "boolean"},
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "radius"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "random_even"},
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "entries"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "table"},
                        "entries": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["k", "a"],
                                "additionalProperties": False,
                                "properties": {"k": _vec, "a": {"type": "number", "minimum": 0}},
                            },
                        },
                    },
                },
            ]
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_grid": _nums,
                "fit_window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "method": {"enum": ["auto", "explicit", "krylov"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "m_list": _nums,
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "directions_n": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "r_list": _nums,
                "C": {"type": "number", "minimum": 1},
                "slope_K": _nums,
                "width": {"type": "number", "exclusiveMinimum": 1},
                "p_list": _nums,
                "R": {"type": "number"},
                "r0": {"type": "number", "minimum": 4},
                "K_grid": _nums,
                "n_cases": {"type": "integer", "minimum": 1},
                "field_radius": {"type": "integer", "minimum": 1},
                "max_points": {"type": "integer", "minimum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "T": {"type": "number", "minimum": 0},
                "n_samples": {"type": "integer", "minimum": 1},
                "extrapolate": {"type": "boolean"},
                "z_threshold": {"type": "number", "exclusiveMinimum": 0},
                "site_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "format": {"enum": ["csv", "krl1"]},
            },
        },
    },
}

DEFAULT_PARAMS = {
    "t_grid": [round(0.05 * i, 2) for i in range(21)],
    "fit_window": [0.2, 1.0],
    "method": "auto",
    "tol": 1e-11,
    "m_list": [2, 3],
    "beta": None,
    "directions_n": [1, 2],
    "r_list": [0.25, 0.125, 0.0625],
    "C": 10.0,
    "slope_K": None,
    "width": math.sqrt(2.0),
    "p_list": [1.1, 1.5, 2.0],
    "R": None,
    "r0": 4.0,
    "K_grid": [1, 2, 4],
    "n_cases": 1000,
    "field_radius": 8,
    "max_points": 20,
    "dt": 1e-4,
    "T": 0.5,
    "n_samples": 10000,
    "extrapolate": True,
    "z_threshold": 4.0,
    "site_fraction": 0.99,
}


class ConfigError(ValueError):
    pass


class CertificateFailure(RuntimeError):
    """A guaranteed inequality or an oracle agreement check failed."""


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read a config, or the ``config`` block of a previous run's manifest."""
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw["config"]
    return raw


def resolve_config(raw: dict, study: str, seed: int | None = None) -> dict:
    """Validate against the schema and fill every default, so the result is self-describing."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    if raw.get("study", study) != study:
        raise ConfigError(f"config is for study {raw['study']!r}, invoked as {study!r}")
    cfg = copy.deepcopy(raw)
    cfg["version"] = CONFIG_VERSION
    cfg["study"] = study
    cfg["seed"] = int(seed if seed is not None else cfg.get("seed", 0))
    try:
        spec = ModelSpec.from_dict(cfg["model"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    cfg["model"] = spec.to_dict()
    d = spec.d
    cfg.setdefault("kappa", [1e-3])
    init = cfg.setdefault("initial", {"kind": "mode", "k": [1] + [0] * (d - 1)})
    if init["kind"] == "mode":
        init.setdefault("amplitude", 1.0)
        init.setdefault("symmetric", study == "mc-validate")
    elif init["kind"] == "random_even":
        init.setdefault("seed", cfg["seed"])
    params = dict(DEFAULT_PARAMS)
    params.update(cfg.get("params", {}))
    if params["beta"] is None:
        params["beta"] = 1.0 - spec.alpha
    if params["R"] is None:
        params["R"] = params["r0"]
    if params["slope_K"] is None:
        top = cfg["lattice"]["N"] / (2 * params["width"])
        params["slope_K"] = [float(k) for k in np.geomspace(max(1.0, top / 10), top, 9)]
    cfg["params"] = params
    out = cfg.setdefault("output", {})
    out.setdefault("format", "csv")
    return cfg


def initial_field(cfg: dict, lattice) -> np.ndarray:
    init = cfg["initial"]
    a0 = np.zeros(lattice.size)
    if init["kind"] == "mode":
        i = lattice.id_of(init["k"])
        if i < 0 or len(init["k"]) != lattice.d:
            raise ConfigError(f"initial mode {init['k']} is not a lattice site")
        a0[i] = init["amplitude"]
        if init["symmetric"]:
            a0[lattice.negation[i]] = init["amplitude"]
    elif init["kind"] == "random_even":
        rng = np.random.default_rng(init["seed"])
        vals = rng.exponential(1.0, lattice.size)
        vals = 0.5 * (vals + vals[lattice.negation])
        a0 = np.where(lattice.norms <= init["radius"], vals, 0.0)
    else:
        for e in init["entries"]:
            i = lattice.id_of(e["k"]) if len(e["k"]) == lattice.d else -1
            if i < 0:
                raise ConfigError(f"table entry {e['k']} is not a lattice site")
            a0[i] = e["a"]
    if not np.any(a0 > 0):
        raise ConfigError("initial data is identically zero")
    return a0


# --------------------------------------------------------------------------
# studies; each writes into ``out`` and returns a summary dict for the manifest


def _dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_trajectory(traj, path_stem: Path, fmt: str) -> str:
    if fmt == "krl1":
        path = path_stem.with_suffix(".krl1")
        traj.write_binary(path)
    else:
        path = path_stem.with_suffix(".csv")
        traj.write_csv(path)
    return path.name


def _setup(cfg):
    coeffs = build(ModelSpec.from_dict(cfg["model"]))
    lattice = enumerate_lattice(coeffs.d, cfg["lattice"]["N"])
    return coeffs, lattice


def study_decay(cfg, out: Path, threads: int) -> dict:
    coeffs, lattice = _setup(cfg)
    p = cfg["params"]
    a0 = initial_field(cfg, lattice)
    t = np.asarray(p["t_grid"], dtype=float)
    lo, hi = p["fit_window"]
    window = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    support_min = float(lattice.norm_sq[a0 > 0].min())
    runs = []
    for i, kappa in enumerate(cfg["kappa"]):
        gen = assemble(coeffs, lattice, kappa, workers=threads)
        traj = integrate(gen, a0, t, tol=p["tol"], method=p["method"])
        name = _write_trajectory(traj, out / f"trajectory_{i}", cfg["output"]["format"])
        l1 = traj.mass()
        fit = fit_decay_rate(t[window], l1[window]) if window.sum() >= 5 else None
        runs.append({
            "kappa": kappa,
            "path": traj.path,
            "n_matvec": traj.n_matvec,
            "trajectory": name,
            "l1": l1.tolist(),
            "cumulative_outflow": traj.cumulative_outflow().tolist(),
            "cumulative_heat": traj.time_integral(gen.heat).tolist(),
            "fitted_rate": None if fit is None else fit.rate,
            "fit_residual": None if fit is None else fit.residual,
            "heat_rate": 8 * math.pi ** 2 * kappa * support_min,
        })
    _dump({"t": t.tolist(), "fit_window": [lo, hi], "runs": runs}, out / "decay.json")
    return {"runs": len(runs)}


def study_smoothing(cfg, out: Path, threads: int) -> dict:
    coeffs, lattice = _setup(cfg)
    p = cfg["params"]
    a0 = initial_field(cfg, lattice)
    t = np.asarray(p["t_grid"], dtype=float)
    mass0 = math.fsum(a0)
    runs = []
    for kappa in cfg["kappa"]:
        gen = assemble(coeffs, lattice, kappa, workers=threads)
        traj = integrate(gen, a0, t, tol=p["tol"], method=p["method"])
        reg = {str(m): regularization_integral(traj, SigmaWeight(beta=p["beta"], m=m)) for m in p["m_list"]}
        # smoothing along the last coordinate, the constant direction of the shear family
        kd = lattice.points[:, -1].astype(float) ** 2
        const_dir = {str(n): math.fsum(kd ** n * traj.values[-1]) / mass0 for n in p["directions_n"]}
        runs.append({"kappa": kappa, "path": traj.path, "regularization": reg,
                     "constant_direction_moments": const_dir, "t_end": float(t[-1])})
    _dump({"beta": p["beta"], "runs": runs}, out / "smoothing.json")
    return {"runs": len(runs)}


def _invariant_runs(cfg, out: Path, threads: int):
    coeffs, lattice = _setup(cfg)
    p = cfg["params"]
    F = initial_field(cfg, lattice)
    for i, kappa in enumerate(cfg["kappa"]):
        gen = assemble(coeffs, lattice, kappa, workers=threads)
        sol = invariant_spectrum(gen, F, tol=min(p["tol"], 1e-10))
        with open(out / f"invariant_{i}.csv", "w") as fh:
            fh.write("site_id," + ",".join(f"k{c}" for c in range(lattice.d)) + ",x\n")
            for sid, (pt, x) in enumerate(zip(lattice.points, sol.x)):
                fh.write(f"{sid}," + ",".join(str(int(c)) for c in pt) + f",{float(x)!r}\n")
        yield i, kappa, coeffs, lattice, gen, F, sol


def study_invariant(cfg, out: Path, threads: int) -> dict:
    runs = []
    for i, kappa, coeffs, lattice, gen, F, sol in _invariant_runs(cfg, out, threads):
        dissipated, injected = stationary_balance(gen, sol.x, F)
        runs.append({"kappa": kappa, "method": sol.method, "iterations": sol.iterations,
                     "residual": sol.residual, "dissipation": dissipated, "input": injected,
                     "table": f"invariant_{i}.csv"})
    _dump({"runs": runs}, out / "invariant.json")
    return {"runs": len(runs)}


def study_annuli(cfg, out: Path, threads: int) -> dict:
    p = cfg["params"]
    runs = []
    for i, kappa, coeffs, lattice, gen, F, sol in _invariant_runs(cfg, out, threads):
        report = annulus_report(sol.x, lattice, coeffs.alpha, p["r_list"], p["C"], math.fsum(F), kappa)
        report.write_csv(out / f"annuli_{i}.csv")
        fit = annulus_slope(sol.x, lattice, p["slope_K"], p["width"], against="r")
        runs.append({
            "kappa": kappa,
            "report": report.to_dict(),
            "slope_vs_r": fit.slope,
            "predicted_slope": 2 * (1 - coeffs.alpha),
            "slope_K": fit.K.tolist(),
            "annulus_sums": fit.sums.tolist(),
            "annulus_counts": fit.counts.tolist(),
            "dissipation_wavenumber": dissipation_scale(kappa, coeffs.alpha) if kappa > 0 else None,
            "solver": {"method": sol.method, "iterations": sol.iterations, "residual": sol.residual},
        })
    _dump({"runs": runs}, out / "spectrum_report.json")
    return {"runs": len(runs)}


def study_poincare(cfg, out: Path, threads: int) -> dict:
    coeffs, _ = _setup(cfg)
    p = cfg["params"]
    audit = audit_assumption(coeffs, r0=p["r0"], K_grid=p["K_grid"], seed=cfg["seed"])
    _dump(audit.to_dict(), out / "audit.json")
    rows, witnesses = batch_verify(coeffs, audit, p["n_cases"], p["p_list"], R=p["R"], seed=cfg["seed"],
                                   radius=p["field_radius"], max_points=p["max_points"])
    write_batch_csv(rows, out / "poincare.csv")
    write_witnesses(witnesses, out / "witnesses.json")
    finite = [r.ratio for r in rows if math.isfinite(r.ratio)]
    summary = {"cases": len(rows), "violations": len(witnesses),
               "max_empirical_ratio": max(finite) if finite else None,
               "extrapolated_psi": any(r.extrapolated_psi for r in rows)}
    _dump(summary, out / "poincare_summary.json")
    if witnesses:
        raise CertificateFailure(f"{len(witnesses)} Poincare violations; witnesses in witnesses.json")
    return summary


def study_mc_validate(cfg, out: Path, threads: int) -> dict:
    coeffs, lattice = _setup(cfg)
    p = cfg["params"]
    a0 = initial_field(cfg, lattice)
    results = []
    failed = []
    for i, kappa in enumerate(cfg["kappa"]):
        ens = simulate(coeffs, lattice, kappa, a0, p["dt"], p["T"], p["n_samples"], cfg["seed"],
                       extrapolate=p["extrapolate"])
        write_snapshot_csv(ens, out / f"mc_snapshots_{i}.csv", extrapolated=p["extrapolate"])
        gen = assemble(coeffs, lattice, kappa, workers=threads)
        ref = integrate(gen, a0, [0.0, p["T"]] if p["T"] > 0 else [0.0]).values[-1]
        m = empirical_second_moments(ens, p["T"], extrapolated=p["extrapolate"])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(m.se > 0, np.abs(m.mean - ref) / m.se, np.where(m.mean == ref, 0.0, np.inf))
        frac = float(np.mean(z < p["z_threshold"]))
        ok = m.se_defined and frac >= p["site_fraction"]
        results.append({"kappa": kappa, "max_z": float(np.max(z)), "fraction_within": frac,
                        "extrapolated": p["extrapolate"], "se_defined": m.se_defined, "pass": bool(ok),
                        "snapshots": f"mc_snapshots_{i}.csv"})
        if not ok:
            failed.append(kappa)
    _dump({"runs": results, "z_threshold": p["z_threshold"], "site_fraction": p["site_fraction"]},
          out / "mc_validation.json")
    if failed:
        raise CertificateFailure(f"Monte Carlo disagrees with the master equation at kappa={failed}")
    return {"runs": len(results)}


RUNNERS = {
    "decay": study_decay,
    "smoothing": study_smoothing,
    "invariant": study_invariant,
    "annuli": study_annuli,
    "poincare": study_poincare,
    "mc-validate": study_mc_validate,
}


# --------------------------------------------------------------------------
# orchestration


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(cfg: dict, code: int, message: str, workdir: Path) -> dict:
    artifacts = {p.name: _sha256(p) for p in sorted(workdir.iterdir()) if p.name != "manifest.json"}
    echoed = copy.deepcopy(cfg)
    echoed.get("output", {}).pop("directory", None)
    return {
        "manifest_version": 1,
        "tool": "kraichnan-lab",
        "code_version": __version__,
        "study": cfg.get("study"),
        "seeds": {"run": cfg.get("seed"), "initial": cfg.get("initial", {}).get("seed")},
        "config": echoed,
        "exit_code": code,
        "message": message,
        "artifacts": artifacts,
    }


def _install(workdir: Path, target: Path) -> None:
    """Move ``workdir`` onto ``target``, replacing any previous run there."""
    if target.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{target.name}.old-", dir=target.parent))
        os.replace(target, old / target.name)
        os.replace(workdir, target)
        shutil.rmtree(old)
    else:
        os.replace(workdir, target)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _set_threads(n: int) -> int:
    import numba

    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def run(study: str, cfg: dict, out: Path, threads: int = 1) -> tuple[int, str]:
    """Run one resolved study into ``out``; returns (exit code, message)."""
    out = Path(out).resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    threads = _set_threads(threads)
    try:
        summary = RUNNERS[study](cfg, workdir, threads)
        code, message = EXIT_OK, json.dumps(summary, sort_keys=True)
    except AssumptionError as exc:
        code, message = EXIT_AUDIT, f"assumption audit failed: {exc}"
    except (StiffnessError, SolverError, StabilityError, np.linalg.LinAlgError, FloatingPointError) as exc:
        code, message = EXIT_NUMERICAL, f"numerical failure: {exc}"
    except CertificateFailure as exc:
        code, message = EXIT_CERTIFICATE, f"certificate failure: {exc}"
    except ConfigError as exc:
        code, message = EXIT_USAGE, f"invalid input: {exc}"
    except ValueError as exc:
        code, message = EXIT_USAGE, f"invalid input: {exc}"
    except BaseException:
        shutil.rmtree(workdir, ignore_errors=True)
        raise
    if code not in (EXIT_OK, EXIT_CERTIFICATE):
        # partial outputs are discarded; certificate failures keep their witnesses
        shutil.rmtree(workdir)
        workdir.mkdir()
    _dump(_manifest(cfg, code, message, workdir), workdir / "manifest.json")
    _install(workdir, out)
    return code, message


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 2 is reserved for audit failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="kraichnan-lab", description="Second-moment studies for Kraichnan passive scalars.")
    ap.add_argument("study", choices=STUDIES)
    ap.add_argument("--config", required=True, help="JSON config, or a manifest.json from an earlier run")
    ap.add_argument("--out", help="output directory (overrides output.directory)")
    ap.add_argument("--threads", type=int, help=f"worker threads (overrides ${THREADS_ENV})")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config seed)")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        if args.seed is not None and not (0 <= args.seed < 2 ** 64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = resolve_config(raw, args.study, args.seed)
        threads = resolve_threads(args.threads)
        out = args.out or raw.get("output", {}).get("directory")
        if not out:
            raise ConfigError("no output directory: pass --out or set output.directory")
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"kraichnan-lab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    code, message = run(args.study, cfg, Path(out), threads)
    print(message, file=sys.stderr if code else sys.stdout)
    return code


if __name__ == "__main__":
    sys.exit(main())
