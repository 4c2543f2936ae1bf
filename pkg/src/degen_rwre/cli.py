"""Command-line runner: ``degen-rwre <subcommand> [--config PATH] [flags]``.

Every run writes its outputs under ``<out>/<subcommand>-<hash12>`` (with an
``-rN`` suffix when that directory already exists) followed by an atomically
written ``manifest.json`` listing every output with its checksum.
"""

import argparse
import copy
import hashlib
import json
import math
import os
import sys
import time

import jsonschema
import numpy as np

from . import __version__
from .corrector import (build_psi_chi, corrector_field, dirichlet_certificates, heat_residual,
                        phi_average, sigma2_estimate)
from .dual import (DualSkeleton, clock_identity_residual, delta_monotonicity, delta_time_change,
                   exact_time_change)
from .env import EnvironmentWindow
from .errors import CertificateFailure, RWREError, ValidationError
from .forward import simulate_X
from .harness import qip_experiment, subdiffusive_experiment
from .io import atomic_write, dumps, sha256_file, write_csv, write_json
from .kernel import kernel_iterate
from .percolation import (InterarrivalModel, generate_environment, moment_check,
                          plan_alpha)

CONFIG_VERSION = 1
SUBCOMMANDS = ("gen-env", "sim-x", "sim-y", "kernel", "corrector", "certify", "qip", "subdiff",
               "report")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}
_count = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_ipair = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}

ENV_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "file": {"type": "string"},
        "constant": {"type": "number", "minimum": 0},
        "model": {"type": "object"},
        "L": _count,
        "x_min": {"type": ["integer", "null"]},
        "window": _pair,
        "periodic": {"type": "boolean"},
        "time_period": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "start": {"enum": ["stationary", "delayed"]},
    },
    "oneOf": [{"required": ["file"]}, {"required": ["constant", "L", "window"]},
              {"required": ["model", "L", "window"]}],
}

_COMMON = {"schema_version": {"const": CONFIG_VERSION}, "seed": {"type": "integer", "minimum": 0}}

PARAMS = {
    "gen-env": {"env": ENV_SCHEMA, "moment_orders": {"type": ["array", "null"], "items": _num,
                                                     "minItems": 2, "maxItems": 2}},
    "sim-x": {"env": ENV_SCHEMA, "x0": _int, "t0": _num, "t_end": _num, "n_paths": _count},
    "sim-y": {"env": ENV_SCHEMA, "x0": _int, "t_end": _pos, "n_paths": _count, "anchor": _num,
              "deltas": {"type": "array", "items": {"type": "number", "minimum": 0}}},
    "kernel": {"env": ENV_SCHEMA, "s": _num, "t": _num, "sites": _ipair, "n_max": _count,
               "h": _pos, "order": {"type": "integer", "minimum": 2}, "tol": {"type": "number", "minimum": 0},
               "targets": {"enum": ["range", "domain"]}, "torus": {"type": "boolean"}},
    "corrector": {"env": ENV_SCHEMA, "epsilon": {"type": "number", "minimum": 0},
                  "t_range": _pair, "x_range": _ipair, "n_t": _count,
                  "sigma2_eps": {"type": "array", "items": _pos, "minItems": 1}},
    "certify": {"env": ENV_SCHEMA, "eps_grid": {"type": "array", "items": _pos, "minItems": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 3}, "mass_tol": _pos,
                "heat_tol": _pos},
    "qip": {"env": ENV_SCHEMA, "model": {"type": "object"}, "L": {"type": ["integer", "null"]},
            "scales": {"type": "array", "items": _count, "minItems": 1},
            "t_grid": {"type": "array", "items": _pos, "minItems": 2},
            "n_paths": _count, "n_blocks": _count, "override": {"type": "boolean"},
            "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "n_boot": _count, "moment_orders": _pair},
    "subdiff": {"off_tail_index": _pos, "t_grid": {"type": "array", "items": _pos, "minItems": 2},
                "n_paths": _count, "control_rate": _pos,
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "n_boot": _count, "method": {"enum": ["ols", "theil_sen"]}},
    "report": {"runs": {"type": "array", "items": {"type": "string"}, "minItems": 1}},
}

DEFAULTS = {
    "gen-env": {"moment_orders": None},
    "sim-x": {"x0": 0, "t0": 0.0, "t_end": 10.0, "n_paths": 10},
    "sim-y": {"x0": 0, "t_end": 10.0, "n_paths": 10, "anchor": 0.0, "deltas": []},
    "kernel": {"s": 1.0, "t": 0.0, "sites": [-5, 5], "n_max": 200, "h": 0.25, "order": 10,
               "targets": "domain", "torus": False},
    "corrector": {"epsilon": 0.1, "t_range": [0.0, 1.0], "x_range": [0, 4], "n_t": 5,
                  "sigma2_eps": [0.02, 0.01]},
    "certify": {"eps_grid": [0.5, 0.1], "alpha": 4.0},
    "qip": {"L": None, "scales": [1, 10, 100], "t_grid": [0.25, 0.5, 0.75, 1.0],
            "n_blocks": 1, "override": False, "level": 0.95, "moment_orders": [8.0, 8.0]},
    "subdiff": {"off_tail_index": 0.4, "t_grid": [1e2, 1e3, 1e4, 1e5, 1e6], "control_rate": 1.0,
                "level": 0.95, "method": "ols"},
    "report": {},
}

# profile-dependent defaults; also recorded as the run's error budgets
PROFILES = {
    "strict": {"kernel": {"tol": 1e-12}, "certify": {"mass_tol": 1e-6, "heat_tol": 1e-6},
               "qip": {"n_paths": 10_000, "n_boot": 400}, "subdiff": {"n_paths": 200, "n_boot": 400}},
    "fast": {"kernel": {"tol": 1e-8}, "certify": {"mass_tol": 1e-4, "heat_tol": 1e-4},
             "qip": {"n_paths": 1000, "n_boot": 100}, "subdiff": {"n_paths": 50, "n_boot": 100}},
}


def schema_for(sub):
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {**_COMMON, **PARAMS[sub]},
        "required": ["env"] if "env" in PARAMS[sub] and sub != "qip" else [],
    }


def resolve_config(sub, raw, seed=None, profile="strict"):
    """Validate ``raw`` against the subcommand schema and fill in every default."""
    raw = dict(raw or {})
    raw.pop("subcommand", None)
    raw.setdefault("schema_version", CONFIG_VERSION)
    try:
        jsonschema.validate(raw, schema_for(sub))
    except jsonschema.ValidationError as exc:
        raise ValidationError("invalid config: " + exc.message, path=list(exc.absolute_path))
    cfg = copy.deepcopy(DEFAULTS[sub])
    cfg.update(PROFILES[profile].get(sub, {}))
    cfg.update(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    if sub == "qip" and ("env" in cfg) == ("model" in cfg):
        raise ValidationError("qip needs exactly one of env or model")
    if "env" in cfg:
        env = {"periodic": False, "time_period": None, "start": "stationary", "x_min": None}
        env.update(cfg["env"])
        cfg["env"] = env
    return dict(sorted(cfg.items()))


def config_hash(sub, cfg, profile):
    text = dumps({"subcommand": sub, "profile": profile, "config": cfg}, indent=0)
    return hashlib.sha256(text.encode()).hexdigest()


def build_env(spec, seed):
    if "file" in spec:
        with open(spec["file"]) as fh:
            return EnvironmentWindow.from_json(fh.read())
    L = int(spec["L"])
    x_min = -(L // 2) if spec.get("x_min") is None else int(spec["x_min"])
    t0, t1 = map(float, spec["window"])
    tp = spec.get("time_period")
    if tp is not None:
        t1 = t0 + float(tp)
    if "constant" in spec:
        return EnvironmentWindow.constant(float(spec["constant"]), x_min, x_min + L, t0, t1,
                                          spec["periodic"], tp)
    model = InterarrivalModel.from_spec(spec["model"])
    return generate_environment(model, L, (t0, t1), periodic=spec["periodic"], seed=seed,
                                x_min=x_min, time_period=tp, start=spec["start"])


class RunDir:
    """Append-only output directory for one run."""

    def __init__(self, root, sub, digest):
        base = os.path.join(root, f"{sub}-{digest[:12]}")
        path, k = base, 1
        while os.path.exists(path):
            k += 1
            path = f"{base}-r{k}"
        os.makedirs(path)
        self.path = path
        self.files = []

    def text(self, name, text):
        atomic_write(os.path.join(self.path, name), text)
        self.files.append(name)

    def json(self, name, obj):
        write_json(os.path.join(self.path, name), obj)
        self.files.append(name)

    def csv(self, name, header, columns):
        write_csv(os.path.join(self.path, name), header, columns)
        self.files.append(name)

    def manifest(self, info):
        info["outputs"] = [{"file": f, "sha256": sha256_file(os.path.join(self.path, f)),
                            "bytes": os.path.getsize(os.path.join(self.path, f))} for f in self.files]
        write_json(os.path.join(self.path, "manifest.json"), info)


# -- subcommands ------------------------------------------------------------


def cmd_gen_env(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    out.text("environment.json", env.to_json() + "\n")
    summary = {"n_edges": env.n_edges, "bounds": list(env.view_bounds()),
               "periodic": env.periodic, "time_period": env.time_period}
    if "model" in cfg["env"] and cfg["moment_orders"]:
        p, s = cfg["moment_orders"]
        mc = moment_check(InterarrivalModel.from_spec(cfg["env"]["model"]), p, s, seed=cfg["seed"])
        summary["moment_check"] = mc
        summary["plan_alpha"] = plan_alpha(p, s)
    out.json("summary.json", summary)
    return {}


def cmd_sim_x(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    cols = [[], [], []]
    summary = []
    for p in range(cfg["n_paths"]):
        rec = simulate_X(env, cfg["x0"], cfg["t0"], cfg["t_end"], cfg["seed"], p)
        for c, v in zip(cols, rec.csv_columns(p)):
            c.append(v)
        summary.append({"path_id": p, "n_jumps": rec.n_jumps,
                        "final": rec.position_at(cfg["t_end"]), "feasible": rec.check_feasible(env)})
    out.csv("paths.csv", ["path_id", "time", "position"], [np.concatenate(c) for c in cols])
    out.json("summary.json", {"paths": summary})
    return {}


def cmd_sim_y(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    pid, ts, As, sl, dl = [], [], [], [], []
    jp, jt, jx = [], [], []
    rows = []
    for p in range(cfg["n_paths"]):
        sk = DualSkeleton.sample(cfg["x0"], cfg["seed"], p)
        rec = exact_time_change(env, sk, cfg["t_end"], cfg["anchor"])
        recs = [rec] + [delta_time_change(env, sk, cfg["t_end"], d, cfg["anchor"])
                        for d in cfg["deltas"]]
        for r in recs:
            n = len(r.breakpoints)
            pid.append(np.full(n, p))
            dl.append(np.full(n, r.delta))
            ts.append(r.breakpoints)
            As.append(r.values)
            sl.append(np.concatenate((r.slopes, [math.nan])))
        times = np.asarray(rec.meta["jump_times"], float)
        jp.append(np.full(len(times) + 1, p))
        jt.append(np.concatenate(([0.0], times)))
        jx.append(np.asarray(rec.Y(jt[-1])))
        row = {"path_id": p, "clock_residual": clock_identity_residual(env, rec),
               "n_jumps": len(times), "final": int(rec.Y(cfg["t_end"]))}
        if cfg["deltas"]:
            row["delta_order"] = delta_monotonicity(recs)
        rows.append(row)
    out.csv("clocks.csv", ["path_id", "delta", "t", "A", "slope"],
            [np.concatenate(v) for v in (pid, dl, ts, As, sl)])
    out.csv("paths.csv", ["path_id", "time", "position"], [np.concatenate(v) for v in (jp, jt, jx)])
    out.json("summary.json", {"paths": rows})
    return {"clock_residual_max": max(r["clock_residual"] for r in rows)}


def cmd_kernel(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    tab = kernel_iterate(env, cfg["s"], cfg["t"], tuple(cfg["sites"]), n_max=cfg["n_max"],
                         h=cfg["h"], order=cfg["order"], tol=cfg["tol"],
                         targets="domain" if cfg["targets"] == "domain" else None,
                         torus=cfg["torus"])
    xs, ys = np.meshgrid(tab.sites, tab.targets, indexing="ij")
    out.csv("kernel.csv", ["x", "y", "K", "escape"],
            [xs.ravel(), ys.ravel(), tab.values.ravel(), tab.escape.ravel()])
    summary = tab.summary()
    summary["row_sums"] = tab.row_sums.tolist()
    out.json("summary.json", summary)
    return {"kernel_tol": cfg["tol"], "max_escape": summary["max_escape"]}


def cmd_corrector(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    f, grid, diag = build_psi_chi(env, cfg["epsilon"], cfg["t_range"], cfg["x_range"], cfg["n_t"])
    out.csv("grid.csv", ["t", "x", "phi", "chi_eps", "psi", "chi"], list(grid.T))
    diag["budget"] = f.budget
    if cfg["epsilon"] > 0:
        diag["sigma2"] = sigma2_estimate(env, cfg["sigma2_eps"])
    out.json("summary.json", diag)
    return {"corrector": f.budget}


def cmd_certify(cfg, out, ctx):
    env = build_env(cfg["env"], cfg["seed"])
    cert = dirichlet_certificates(env, cfg["eps_grid"], cfg["alpha"])
    failures = [] if cert["all_pass"] else ["dirichlet"]
    checks = []
    for eps in cfg["eps_grid"]:
        f = corrector_field(env, eps)
        if f.constant is not None:
            mass, heat = 1.0, 0.0
        else:
            mass = phi_average(f)[0]
            heat = heat_residual(f)["max_residual"]
        row = {"epsilon": eps, "phi_average": mass, "mass_ok": abs(mass - 1) <= cfg["mass_tol"],
               "heat_residual": heat, "heat_ok": heat <= cfg["heat_tol"]}
        checks.append(row)
        if not (row["mass_ok"] and row["heat_ok"]):
            failures.append(f"epsilon={eps}")
    out.json("certificates.json", {"dirichlet": cert, "checks": checks, "all_pass": not failures})
    if failures:
        raise CertificateFailure("certificate failure", failed=failures)
    return {"mass_tol": cfg["mass_tol"], "heat_tol": cfg["heat_tol"]}


def cmd_qip(cfg, out, ctx):
    if "env" in cfg:
        source = build_env(cfg["env"], cfg["seed"])
    else:
        source = InterarrivalModel.from_spec(cfg["model"])
    rep = qip_experiment(source, cfg["scales"], cfg["t_grid"], cfg["n_paths"], cfg["seed"],
                         cfg["n_blocks"], cfg["L"], cfg["level"], cfg["n_boot"],
                         tuple(cfg["moment_orders"]), cfg["override"], workers=ctx["workers"])
    out.json("report.json", rep.to_dict())
    out.text("raw.csv", rep.raw_csv())
    out.text("variance.dat", rep.plot_data())
    n = str(max(rep.scales))
    out.csv("ks.dat", ["t", "ks"], [np.array(rep.t_grid),
                                    np.array([rep.ks[n][str(t)]["ks"] for t in rep.t_grid])])
    return {"sigma2_ci": rep.ci}


def cmd_subdiff(cfg, out, ctx):
    rep = subdiffusive_experiment(cfg["off_tail_index"], cfg["t_grid"], cfg["n_paths"],
                                  cfg["seed"], cfg["control_rate"], level=cfg["level"],
                                  n_boot=cfg["n_boot"], method=cfg["method"])
    out.json("report.json", rep.to_dict())
    out.csv("max_growth.dat", ["t", "positive", "control"],
            [np.array(rep.t_grid), np.array(rep.positive["mean_running_max"]),
             np.array(rep.control["mean_running_max"])])
    return {}


def cmd_report(cfg, out, ctx):
    runs = []
    for d in cfg["runs"]:
        with open(os.path.join(d, "manifest.json")) as fh:
            man = json.load(fh)
        intact = all(sha256_file(os.path.join(d, o["file"])) == o["sha256"] for o in man["outputs"])
        runs.append({"run": os.path.basename(os.path.normpath(d)), "subcommand": man["subcommand"],
                     "status": man["status"], "config_hash": man["config_hash"],
                     "checksums_intact": intact})
    out.json("report.json", {"runs": runs})
    return {}


COMMANDS = {"gen-env": cmd_gen_env, "sim-x": cmd_sim_x, "sim-y": cmd_sim_y, "kernel": cmd_kernel,
            "corrector": cmd_corrector, "certify": cmd_certify, "qip": cmd_qip,
            "subdiff": cmd_subdiff, "report": cmd_report}


def _parser():
    p = argparse.ArgumentParser(prog="degen-rwre", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="inline config entry (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="output root (default $DEGEN_RWRE_OUT or ./runs)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tolerance-profile", choices=sorted(PROFILES), default="strict")
    return p


def _fail(exc, code):
    body = exc.to_dict() if isinstance(exc, RWREError) else {"error": type(exc).__name__,
                                                             "message": str(exc), "details": {}}
    sys.stderr.write(dumps(body) + "\n")
    return code


def run(argv=None):
    """Parse ``argv``, run one subcommand and return the exit code."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            return 0
        return _fail(ValidationError("invalid command line", argv=list(argv or sys.argv[1:])), 2)
    sub = args.subcommand
    try:
        raw = {}
        if args.config:
            with open(args.config) as fh:
                raw = json.load(fh)
            if raw.get("subcommand", sub) != sub:
                raise ValidationError("config is for another subcommand", config=raw["subcommand"])
        for item in args.set:
            key, _, val = item.partition("=")
            try:
                raw[key] = json.loads(val)
            except json.JSONDecodeError:
                raw[key] = val
        if args.workers < 1:
            raise ValidationError("need --workers >= 1")
        cfg = resolve_config(sub, raw, args.seed, args.tolerance_profile)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(ValidationError(f"cannot read config: {exc}"), 2)
    except RWREError as exc:
        return _fail(exc, exc.exit_code)
    digest = config_hash(sub, cfg, args.tolerance_profile)
    root = args.out or os.environ.get("DEGEN_RWRE_OUT") or "runs"
    out = RunDir(root, sub, digest)
    started = time.time()
    info = {"subcommand": sub, "config_hash": digest, "tool_version": __version__,
            "profile": args.tolerance_profile, "workers": args.workers, "config": cfg,
            "seeds": {"master": cfg["seed"]}}
    code = 0
    err = None
    try:
        budgets = COMMANDS[sub](cfg, out, {"workers": args.workers}) or {}
    except RWREError as exc:
        budgets, err, code = {}, exc, exc.exit_code
    info["error_budgets"] = {**PROFILES[args.tolerance_profile].get(sub, {}), **budgets}
    info["status"] = "ok" if err is None else type(err).__name__
    info["wall_clock_s"] = time.time() - started
    info["run_dir"] = out.path
    out.manifest(info)
    if err is not None:
        return _fail(err, code)
    sys.stdout.write(out.path + "\n")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
