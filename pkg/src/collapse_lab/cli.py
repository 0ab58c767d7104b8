"""collapse-lab command line.

    collapse-lab <command> --config <path> [--seed N] [--out DIR] [--n-traj N] [--dt X]

Every run writes its artifacts plus ``manifest.json`` (config hash, seed,
library versions, artifact hashes) into the output directory. Exit status is
0 on success, 2 on validation failure or a malformed config, and 1 on any
other error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .constants import DEFAULT_SEED, HBAR, M_NUCLEON
from .noise import TimeGrid, kernel_from_dict
from .quantum_core import Operator, operator_from_dict, state_from_dict

log = logging.getLogger("collapse_lab")

COMMANDS = ("simulate", "master", "collapse-stats", "amplify", "bounds", "hpz", "validate", "compare")


class ConfigError(ValueError):
    pass


class ValidationFailed(RuntimeError):
    pass


def fmt(x) -> str:
    return f"{x:.17g}"


# --------------------------------------------------------------------------
# Config handling


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    # a manifest re-runs its recorded effective config
    if "config_hash" in data and isinstance(data.get("config"), dict):
        data = data["config"]
    return data


def apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    cfg["seed"] = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    if args.n_traj is not None:
        cfg["n_traj"] = args.n_traj
    if args.dt is not None:
        cfg["dt"] = args.dt
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _field(cfg: dict, name: str, default=None, required=False):
    if name in cfg:
        return cfg[name]
    if required:
        raise ConfigError(f"config field {name!r} is required")
    return default


def _wrap(name, fn, *a):
    try:
        return fn(*a)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"config field {name!r}: {e}") from e


def _psi(desc):
    if isinstance(desc, list):
        return np.asarray(desc, dtype=complex)
    return state_from_dict(desc).amplitudes


def sse_from_config(cfg: dict):
    """(SSEConfig, psi0) from the 'simulate' style config."""
    from .trajectories import SSEConfig

    ops = [_wrap("collapse_ops", operator_from_dict, o) for o in _field(cfg, "collapse_ops", required=True)]
    d = ops[0].dim
    H0 = _wrap("H0", operator_from_dict, _field(cfg, "H0", {"dim": d, "re": np.zeros((d, d)).tolist()}))
    psi0 = _wrap("psi0", _psi, _field(cfg, "psi0", required=True))
    scheme = _field(cfg, "scheme", "nonmarkovian")
    kern = None if scheme == "ito" else _wrap("kernel", kernel_from_dict, _field(cfg, "kernel", required=True))
    dt = float(_field(cfg, "dt", 0.005))
    grid = _wrap("t_final", TimeGrid.from_duration, float(_field(cfg, "t_final", required=True)), dt)
    sse = _wrap("system", lambda: SSEConfig(
        H0=H0, collapse_ops=ops, xi=float(_field(cfg, "xi", 0.0)), grid=grid, kernel=kern,
        lambda_ito=float(_field(cfg, "lambda_ito", 0.0)), scheme=scheme, hbar=float(_field(cfg, "hbar", 1.0)),
        allow_noncommuting=bool(_field(cfg, "allow_noncommuting", False)),
        memory_window=_field(cfg, "memory_window", 8.0),
    ))
    return sse, psi0


# --------------------------------------------------------------------------
# Writers


class Writer:
    """Single funnel for artifact files; every file carries the config hash."""

    def __init__(self, out: Path, chash: str):
        self.out, self.chash = out, chash
        self.files = {}
        out.mkdir(parents=True, exist_ok=True)

    def _done(self, name):
        p = self.out / name
        self.files[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        log.info("wrote %s", p)

    def json(self, name, obj):
        body = {"config_hash": self.chash, **obj}
        (self.out / name).write_text(json.dumps(body, indent=1, sort_keys=True, default=_json_default) + "\n")
        self._done(name)

    def table(self, name, header, rows):
        with open(self.out / name, "w") as f:
            f.write(f"# config_hash={self.chash}\n")
            f.write(",".join(header) + "\n")
            for r in rows:
                f.write(",".join(fmt(v) for v in r) + "\n")
        self._done(name)

    def text(self, name, content: str):
        (self.out / name).write_text(f"# config_hash={self.chash}\n" + content)
        self._done(name)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _rho_rows(times, rhos, extra=None):
    d = rhos.shape[1]
    head = ["t"] + [f"{p}_rho_{a}{b}" for a in range(d) for b in range(d) for p in ("re", "im")]
    rows = []
    for k, t in enumerate(times):
        row = [t]
        for x in rhos[k].ravel():
            row += [x.real, x.imag]
        if extra is not None:
            row += list(np.atleast_1d(extra[k]))
        rows.append(row)
    return head, rows


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg, w: Writer) -> dict:
    from .noise import sample_paths
    from .trajectories import integrate_ito_white, integrate_nonmarkovian, integrate_stratonovich_markovian, run_ensemble

    sse, psi0 = sse_from_config(cfg)
    seed, n = int(cfg["seed"]), int(cfg.get("n_traj", 100))
    stats = run_ensemble(sse, psi0, n, seed)
    N = sse.n_channels
    head, rows = _rho_rows(stats.times, stats.rho_mean,
                           np.hstack([stats.mean_V, stats.se_V, stats.mean_A, stats.se_A]))
    head += [f"mean_V_{i}" for i in range(N)] + [f"se_V_{i}" for i in range(N)]
    head += [f"mean_A_{i}" for i in range(N)] + [f"se_A_{i}" for i in range(N)]
    w.table("ensemble.csv", head, rows)

    n_rec = min(int(cfg.get("n_record", 4)), n)
    d = sse.dim
    thead = ["traj", "t"] + [f"{p}_psi_{a}" for a in range(d) for p in ("re", "im")]
    thead += [f"A_{i}" for i in range(N)] + ["norm"]
    trows = []
    for p in range(n_rec):
        if sse.scheme == "ito":
            rec = integrate_ito_white(sse, psi0, seed, p)
        else:
            h = sample_paths(sse.kernel, sse.grid, 1, seed, start=p)
            fn = integrate_nonmarkovian if sse.scheme == "nonmarkovian" else integrate_stratonovich_markovian
            rec = fn(sse, psi0, h, seed, p)
        for k, t in enumerate(rec.times):
            amp = [v for z in rec.states[k] for v in (z.real, z.imag)]
            trows.append([p, t] + amp + list(rec.expectations[k]) + [rec.norm_log[k]])
    w.table("trajectories.csv", thead, trows)
    return {"n_traj": n, "max_norm_drift": stats.max_norm_drift}


def cmd_master(cfg, w: Writer) -> dict:
    from .master_eq import generator_schedule, propagate

    sse, psi0 = sse_from_config(cfg)
    v = psi0 / np.linalg.norm(psi0)
    sched = generator_schedule(sse.H0, sse.collapse_ops, sse.kernel, sse.xi, sse.hbar)
    res = propagate(np.outer(v, v.conj()), sched, sse.grid, raise_on_violation=False)
    head, rows = _rho_rows(res.times, res.rhos, np.column_stack([res.min_eigenvalues, res.trace_errors]))
    w.table("rho.csv", head + ["min_eigenvalue", "trace_error"], rows)
    worst = float(res.min_eigenvalues.min())
    out = {"min_eigenvalue": worst, "max_trace_error": float(res.trace_errors.max())}
    if worst < -1e-6:
        raise ValidationFailed(f"positivity lost: smallest eigenvalue {worst:.3e}")
    return out


def cmd_collapse_stats(cfg, w: Writer) -> dict:
    from .master_eq import variance_decay_prediction
    from .runners import collapse_statistics

    sse, psi0 = sse_from_config(cfg)
    if np.any(sse.H0.entries):
        raise ConfigError("collapse-stats assumes H0 = 0")
    seed, n = int(cfg["seed"]), int(cfg.get("n_traj", 1000))
    rep = collapse_statistics(sse, psi0, n, seed)
    st = rep.stats
    rows = [[t, st.mean_V[k, 0], st.se_V[k, 0]] for k, t in enumerate(st.times)]
    if sse.scheme != "ito":
        A = sse.collapse_ops[0]
        pred = variance_decay_prediction(psi0, A, sse.collapse_ops, sse.kernel, sse.xi, st.times, sse.hbar)
        rows = [r + [p] for r, p in zip(rows, pred)]
        w.table("variance.csv", ["t", "mean_V", "se_V", "predicted_V"], rows)
    else:
        w.table("variance.csv", ["t", "mean_V", "se_V"], rows)
    report = rep.as_dict()
    w.json("collapse_stats.json", report)
    return {"born_z_max": float(np.max(rep.born_z)), "n_not_collapsed": rep.n_not_collapsed}


def _massdist(desc):
    from .amplification import PRESETS, MassDistribution

    if "file" in desc:
        return MassDistribution.from_csv(desc["file"])
    kind = desc.get("preset")
    if kind not in PRESETS:
        raise ConfigError(f"config field 'massdist.preset': unknown preset {kind!r}")
    return PRESETS[kind](**desc.get("args", {}))


def cmd_amplify(cfg, w: Writer) -> dict:
    from .amplification import ObjectShape, adler_estimate, angle_averaged_amplification, limit_diagnostics

    md = _wrap("massdist", _massdist, _field(cfg, "massdist", required=True))
    hbar = float(cfg.get("hbar", 1.0))
    r_list = [float(r) for r in _field(cfg, "r_C", required=True)]
    rows, reports = [], []
    for r in r_list:
        for q in np.logspace(-2, 2, int(cfg.get("n_q", 41))) * hbar / r:
            rows.append([r, q, angle_averaged_amplification(md, q, hbar)])
        reports.append({"r_C": r, **limit_diagnostics(md, r, hbar).as_dict()})
    w.table("amplification.csv", ["r_C", "Q", "A_angle_avg"], rows)
    out = {"total_mass": md.total_mass, "sum_m2": float(np.sum(md.masses**2)), "limits": reports}
    if "shape" in cfg:
        s = cfg["shape"]
        shape = _wrap("shape", lambda: ObjectShape(s["kind"], tuple(s["dims"]), int(s["n_nucleons"])))
        out["adler"] = [{"r_C": r, "A": adler_estimate(shape, r, float(cfg.get("m0", 1.0)))} for r in r_list]
    w.json("amplification.json", out)
    return {"n_r_C": len(r_list)}


def cmd_bounds(cfg, w: Writer) -> dict:
    from .phenomenology import REFERENCE_STRAIN, assemble_diagram, read_bound_csv, shipped_bounds

    paths = cfg.get("curves")
    curves = shipped_bounds() if not paths else [_wrap("curves", read_bound_csv, p) for p in paths]
    dia = assemble_diagram(curves, float(cfg.get("reference", REFERENCE_STRAIN)), float(cfg.get("m0", M_NUCLEON)))
    w.json("diagram.json", dia.to_dict())
    buf = Path(w.out / "diagram.dat")
    dia.write_dat(buf)
    w.text("diagram.dat", buf.read_text())
    return {"xi_min": dia.xi_min, "xi_max": dia.xi_max, "non_empty": dia.non_empty, "consistent": dia.consistent}


def cmd_hpz(cfg, w: Writer) -> dict:
    from .master_eq import PositionGrid
    from .noise import spatial_gaussian
    from .phenomenology import hpz_coefficients, hpz_generator
    from .constants import C_LIGHT

    r_C = float(_field(cfg, "r_C", required=True))
    tau0 = float(cfg.get("tau0", r_C / C_LIGHT))
    xi = float(_field(cfg, "xi", required=True))
    m0 = float(cfg.get("m0", M_NUCLEON))
    tau_c = cfg.get("tau_c")
    temporal = None
    if tau_c is not None:
        tc = float(tau_c)
        temporal = lambda s: tau0 / tc * np.exp(-np.abs(s) / tc)  # noqa: E731 - unit-area OU profile
    kern = spatial_gaussian(r_C, tau0, HBAR, temporal)
    co = hpz_coefficients(kern, xi, m0)
    g = cfg.get("grid", {"n_sites": 12, "dx": r_C / 100})
    grid = PositionGrid(int(g["n_sites"]), float(g["dx"]), HBAR / r_C)
    L = hpz_generator(co, float(cfg.get("A_R", m0**2)), float(cfg.get("A_I", m0**2)), m0,
                      float(cfg.get("m_total", m0)), grid)
    out = {"eta": co.eta, "Pi": co.Pi, "Upsilon": co.Upsilon, "trace_error": L.trace_error()}
    w.json("hpz.json", out)
    return out


def cmd_compare(cfg, w: Writer) -> dict:
    from .runners import compare_ensemble_to_master

    sse, psi0 = sse_from_config(cfg)
    rep = compare_ensemble_to_master(sse, psi0, int(cfg.get("n_traj", 1000)), int(cfg["seed"]),
                                     halvings=int(cfg.get("halvings", 2)), window=cfg.get("window"))
    head = ["t"] + [f"dist_xi{k}" for k in range(len(rep.xis))] + [f"mc_err_xi{k}" for k in range(len(rep.xis))]
    rows = [[t] + list(rep.distance[:, k]) + list(rep.mc_error[:, k]) for k, t in enumerate(rep.times)]
    w.table("compare.csv", head, rows)
    w.json("compare.json", rep.as_dict())
    return {"exponent": rep.exponent, "within_3_mc_errors": rep.within_mc}


# --------------------------------------------------------------------------
# validate: quick invariant checks across all modules


def _check_quantum():
    from .quantum_core import SIGMA_X, SIGMA_Z, common_eigenbasis, heisenberg_evolve

    basis, labels = common_eigenbasis([Operator(SIGMA_Z)])
    assert sorted(l[0] for l in labels) == [-1.0, 1.0] and len(basis) == 2
    A = heisenberg_evolve(Operator(SIGMA_X), Operator(SIGMA_Z), 0.3)
    back = heisenberg_evolve(A, Operator(SIGMA_Z), -0.3)
    assert np.allclose(back.entries, SIGMA_X, atol=1e-12)


def _check_noise():
    from .noise import build_augmented_covariance, white

    grid = TimeGrid(0.01, 20)
    cov = build_augmented_covariance(white(1.0), grid)
    k1 = grid.n_points
    # S = 0: Re and Im each carry half of tau0 / dt and do not correlate
    assert np.allclose(np.diag(cov), 0.5 / grid.dt)
    assert np.allclose(cov[:k1, k1:], 0.0)


def _check_trajectories():
    from .quantum_core import SIGMA_Z
    from .trajectories import SSEConfig, run_ensemble
    from .noise import white

    grid = TimeGrid(0.01, 50)
    psi = np.array([1, 1]) / np.sqrt(2)
    cfg = SSEConfig(Operator(np.zeros((2, 2))), [Operator(SIGMA_Z)], 1.0, grid, white(1.0))
    a = run_ensemble(cfg, psi, 16, 7)
    b = run_ensemble(cfg, psi, 16, 7)
    assert np.array_equal(a.rho_mean, b.rho_mean)
    c = run_ensemble(replace(cfg, xi=0.0), psi, 4, 7)
    assert np.allclose(c.rho_mean[-1], np.full((2, 2), 0.5), atol=1e-12)


def _check_master():
    from .master_eq import build_generator, decoherence_exponent, generator_schedule, propagate
    from .quantum_core import SIGMA_X, SIGMA_Z
    from .noise import ornstein_uhlenbeck, white

    L = build_generator(Operator(0.3 * SIGMA_X), [Operator(SIGMA_Z)], ornstein_uhlenbeck(0.5), 1.0, 1.0)
    assert L.trace_error() < 1e-10 and L.hermiticity_error() < 1e-10
    grid = TimeGrid(0.01, 100)
    rho0 = np.full((2, 2), 0.5, complex)
    sched = generator_schedule(Operator(np.zeros((2, 2))), [Operator(SIGMA_Z)], white(1.0), 1.0)
    rho = propagate(rho0, sched, grid).rhos[-1]
    expo = decoherence_exponent(1.0, -1.0, white(1.0), 1.0, 1.0)
    assert abs(abs(rho[0, 1]) - 0.5 * np.exp(expo)) < 1e-6


def _check_amplification():
    from .amplification import amplification_factor, amplification_factor_pairwise, cubic_lattice

    md = cubic_lattice(3, 0.7)
    assert abs(amplification_factor(md, np.zeros(3)) - md.total_mass**2) < 1e-9
    Q = np.array([0.4, -1.1, 2.0])
    assert abs(amplification_factor(md, Q) - amplification_factor_pairwise(md, Q)) < 1e-9
    assert abs(amplification_factor(md.translated([3, 1, -2]), Q) - amplification_factor(md, Q)) < 1e-9


def _check_phenomenology():
    from .phenomenology import assemble_diagram, hpz_coefficients, lambda_from_xi, shipped_bounds, xi_from_csl
    from .noise import spatial_gaussian

    xi = xi_from_csl(1e-16, 1e-7)
    assert abs(lambda_from_xi(xi, 1e-7) / 1e-16 - 1) < 1e-12
    assert assemble_diagram(shipped_bounds(), 1e-21).consistent
    co = hpz_coefficients(spatial_gaussian(1e-7, 1e-7 / 3e8, HBAR), 1e-22)
    assert co.eta > 0 and co.Pi == 0 and co.Upsilon == 0


VALIDATORS = {
    "quantum_core": _check_quantum, "noise": _check_noise, "trajectories": _check_trajectories,
    "master_eq": _check_master, "amplification": _check_amplification, "phenomenology": _check_phenomenology,
}


def cmd_validate(cfg, w: Writer) -> dict:
    suites = cfg.get("suites", list(VALIDATORS))
    results = {}
    for name in suites:
        if name not in VALIDATORS:
            raise ConfigError(f"config field 'suites': unknown suite {name!r}")
        try:
            VALIDATORS[name]()
            results[name] = "pass"
        except Exception as e:  # report everything, fail at the end
            results[name] = f"fail: {type(e).__name__}: {e}"
        log.info("validate %s: %s", name, results[name])
    w.json("validate.json", {"results": results})
    bad = [k for k, v in results.items() if v != "pass"]
    if bad:
        raise ValidationFailed("failed suites: " + ", ".join(bad))
    return {"results": results}


RUNNERS = {
    "simulate": cmd_simulate, "master": cmd_master, "collapse-stats": cmd_collapse_stats,
    "amplify": cmd_amplify, "bounds": cmd_bounds, "hpz": cmd_hpz, "validate": cmd_validate,
    "compare": cmd_compare,
}


# --------------------------------------------------------------------------
# Entry point


def write_manifest(w: Writer, command, cfg, chash, status, summary, error=None):
    man = {
        "command": command, "config": cfg, "config_hash": chash, "seed": cfg.get("seed"),
        "status": status, "summary": summary, "error": error,
        "versions": {"collapse_lab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "artifacts": dict(sorted(w.files.items())),
    }
    (w.out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True, default=_json_default) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapse-lab", description="Gravity-induced collapse model lab.")
    p.add_argument("--version", action="version", version=f"collapse-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory (default: out/<command>)")
        s.add_argument("--n-traj", type=int, default=None, dest="n_traj")
        s.add_argument("--dt", type=float, default=None)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if os.environ.get("COLLAPSE_LAB_DEBUG"):
        log.setLevel(logging.DEBUG)
    out = Path(args.out or os.path.join("out", args.command))
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    chash = config_hash(cfg)
    w = Writer(out, chash)
    try:
        summary = RUNNERS[args.command](cfg, w)
    except (ConfigError, ValidationFailed) as e:
        write_manifest(w, args.command, cfg, chash, "invalid", None, str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("traceback", exc_info=True)
        write_manifest(w, args.command, cfg, chash, "error", None, f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    write_manifest(w, args.command, cfg, chash, "ok", summary)
    print(json.dumps(summary, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
