"""Command-line entry point: ``harrisdiff <subcommand> --config c.json --out path``."""

import argparse
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from harrisdiff import io as sio
from harrisdiff.errors import DomainError
from harrisdiff.experiments import ExperimentConfig, run_init_bias, run_score_perturb
from harrisdiff.harris import Dissipativity, assemble_bound, harris_constants
from harrisdiff.metrics import EmpiricalCloud, bures_w2, max_sw
from harrisdiff.sampler import ExplicitInit, PerturbationSpec, SamplerConfig, run_chain
from harrisdiff.schedule import Grid, Schedule, make_grid
from harrisdiff.target import build_benchmark_gmm, dissipativity_check, target_from_dict

log = logging.getLogger("harrisdiff")

SUBCOMMANDS = ("sample", "constants", "bound", "metrics", "exp-init-bias",
               "exp-score-perturb", "gmm-build")


class ConfigError(DomainError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


def _base_defaults():
    return {
        "target": {"type": "gaussian", "mean": [1.0], "cov": [[1.0]]},
        "schedule": Schedule.ve_linear().to_dict(),
        "grid": {"n_steps": 100, "spacing": "uniform-in-t"},
        "seed": 0,
    }


DEFAULTS = {
    "sample": lambda: {**_base_defaults(), "n_samples": 1000, "init": None, "perturbation": None},
    "constants": lambda: {**_base_defaults(), "dissipativity": None, "r_sq_factor": 2.0,
                          "alpha0_fraction": 0.5},
    "bound": lambda: {**_base_defaults(), "dissipativity": None, "r_sq_factor": 2.0,
                      "alpha0_fraction": 0.5,
                      "local_errors": {"c_disc": 0.0, "c_net": 0.0, "score_err": 0.0}},
    "metrics": lambda: {"x": "x.csv", "y": "y.csv", "seed": 0, "bures": True,
                        "max_sw": {"step": 1e-3, "tol": 1e-7, "max_iter": 100000, "restarts": 8}},
    "exp-init-bias": lambda: ExperimentConfig(experiment="init-bias").to_dict(),
    "exp-score-perturb": lambda: ExperimentConfig(experiment="score-perturb").to_dict(),
    "gmm-build": lambda: {"seed": 0, "d": 50, "diag_rule": "repeat"},
}


def shipped_configs():
    """Names of the configs bundled with the package."""
    root = resources.files("harrisdiff") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path):
    """Parse a JSON config; ``builtin:<name>`` selects a bundled one."""
    if path.startswith("builtin:"):
        name = path[len("builtin:"):]
        res = resources.files("harrisdiff") / "configs" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"no bundled config {name!r}; available: {shipped_configs()}")
        raw = res.read_bytes()
    else:
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not UTF-8: {exc.reason}", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ConfigError(f"malformed JSON: {exc.msg}", offset) from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object", 0)
    return obj


def _merged(sub, obj):
    cfg = DEFAULTS[sub]()
    unknown = set(obj) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys for {sub}: {sorted(unknown)}")
    cfg.update(obj)
    return cfg


def _setup(cfg):
    target = target_from_dict(cfg["target"])
    schedule = Schedule.from_dict(cfg["schedule"])
    g = cfg["grid"]
    if "times" in g:
        grid = Grid.from_times(schedule, g["times"])
    elif int(g.get("n_steps", 1)) == 0:
        grid = None
    else:
        grid = make_grid(schedule, int(g["n_steps"]), g.get("spacing", "uniform-in-t"),
                         g.get("rho"))
    return target, schedule, grid


def _dissipativity(cfg, target, schedule):
    spec = cfg.get("dissipativity")
    if spec is None:
        a0, b0 = dissipativity_check(target)
    else:
        a0, b0 = float(spec["a0"]), float(spec["b0"])
    d0 = Dissipativity(a0, b0, target.dim)
    d0.require(schedule)
    return d0


def _load_array(spec):
    if isinstance(spec, str):
        return sio.read_samples(spec)
    return np.atleast_2d(np.asarray(spec, dtype=float))


def _emit_json(obj, out):
    text = json.dumps(obj, indent=2, default=_jsonable) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def cmd_sample(cfg, args):
    target, schedule, grid = _setup(cfg)
    init = cfg.get("init")
    if grid is None:
        if init is None:
            raise DomainError("a 0-step run needs an explicit init")
        out = _load_array(init["samples"])
    else:
        explicit = None
        if init is not None:
            explicit = ExplicitInit(_load_array(init["samples"]), int(init.get("start_index", 0)))
        pert = None
        if cfg.get("perturbation"):
            p = cfg["perturbation"]
            pert = PerturbationSpec(p["mode"], np.asarray(p["direction"], dtype=float),
                                    float(p["magnitude"]), p["at"],
                                    p.get("init_scale", "variance"))
        sc = SamplerConfig(schedule, grid, target, init=explicit, perturbation=pert,
                           seed=int(cfg["seed"]))
        n = None if explicit is not None else int(cfg["n_samples"])
        out = run_chain(sc, n, threads=args.threads)
    if args.out:
        sio.write_samples(args.out, out)
    else:
        np.savetxt(sys.stdout, out, delimiter=",", fmt="%.17g")


def _constants(cfg):
    target, schedule, grid = _setup(cfg)
    if grid is None:
        raise DomainError("constants need at least one grid step")
    d0 = _dissipativity(cfg, target, schedule)
    hc = harris_constants(target, schedule, grid, d0, float(cfg["r_sq_factor"]),
                          float(cfg["alpha0_fraction"]))
    hc.notes["dissipativity"] = {"a0": d0.a0, "b0": d0.b0}
    return grid, hc


def cmd_constants(cfg, args):
    _, hc = _constants(cfg)
    _emit_json(hc.to_dict(), args.out)


def cmd_bound(cfg, args):
    grid, hc = _constants(cfg)
    loc = cfg["local_errors"]
    if isinstance(loc, dict):
        triple = (float(loc["c_disc"]), float(loc["c_net"]), float(loc["score_err"]))
        loc = [triple] * grid.n_steps
    hc.bound_value = assemble_bound(grid, hc, loc)
    out = hc.to_dict()
    out.pop("intervals")
    _emit_json(out, args.out)


def cmd_metrics(cfg, args):
    x, y = _load_array(cfg["x"]), _load_array(cfg["y"])
    if x.shape[1] != y.shape[1]:
        raise DomainError(f"sample sets differ in dimension: {x.shape[1]} vs {y.shape[1]}")
    res = max_sw(x, y, seed=int(cfg["seed"]), threads=args.threads, **cfg["max_sw"])
    out = {"max_sw": res.value, "direction": res.u, "iterations": res.iterations,
           "converged": res.converged, "optimizer": res.optimizer,
           "n_samples": [x.shape[0], y.shape[0]]}
    if cfg.get("bures", True):
        cx, cy = EmpiricalCloud(x), EmpiricalCloud(y)
        out["w2_bures"] = bures_w2((cx.mean, cx.cov), (cy.mean, cy.cov))
    _emit_json(out, args.out)


def _experiment(run):
    def cmd(cfg, args):
        ec = ExperimentConfig.from_dict(cfg)
        report = run(ec, threads=args.threads)
        out = args.out or "report.csv"
        report.write(out)
        base = out[:-4] if out.endswith(".csv") else out
        with open(base + ".provenance.json", "w") as fh:
            json.dump(report.provenance, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
    return cmd


def cmd_gmm_build(cfg, args):
    target = build_benchmark_gmm(int(cfg["seed"]), int(cfg["d"]), cfg["diag_rule"])
    _emit_json(target.to_dict(), args.out)


COMMANDS = {
    "sample": cmd_sample,
    "constants": cmd_constants,
    "bound": cmd_bound,
    "metrics": cmd_metrics,
    "exp-init-bias": _experiment(run_init_bias),
    "exp-score-perturb": _experiment(run_score_perturb),
    "gmm-build": cmd_gmm_build,
}


def _default_threads():
    env = os.environ.get("HARRISDIFF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def build_parser():
    parser = argparse.ArgumentParser(prog="harrisdiff", description=__doc__)
    subs = parser.add_subparsers(dest="command", metavar="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = subs.add_parser(name)
        p.add_argument("--config", help="JSON config path, or builtin:<name>")
        p.add_argument("--out", help="output path (stdout when omitted, except reports)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $HARRISDIFF_THREADS or CPU count)")
        p.add_argument("--emit-default-config", action="store_true",
                       help="print the default config for this subcommand and exit")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "metrics":
            p.add_argument("files", nargs="*", help="two sample files, overriding x and y")
    return parser


def _fail(exc, code=1):
    err = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "offset", None) is not None:
        err["offset"] = exc.offset
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is None:
        args.threads = _default_threads()
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        sys.stderr.write("harrisdiff: error: --threads must be >= 1\n")
        return 2
    try:
        if args.emit_default_config:
            _emit_json(DEFAULTS[args.command](), args.out)
            return 0
        obj = load_config(args.config) if args.config else {}
        if args.command == "metrics" and args.files:
            if len(args.files) != 2:
                raise DomainError("metrics takes exactly two sample files")
            obj["x"], obj["y"] = args.files
        elif not args.config:
            raise ConfigError("--config is required")
        cfg = _merged(args.command, obj)
        if args.seed is not None:
            cfg["seed"] = args.seed
        COMMANDS[args.command](cfg, args)
    except (ValueError, RuntimeError, OSError, KeyError, TypeError) as exc:
        if isinstance(exc, KeyError):
            exc = ConfigError(f"missing config key {exc}")
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
