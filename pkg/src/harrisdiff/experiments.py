"""Forgetting experiments: initialization bias and single-step score errors.

Both experiments inject one perturbation of size ``lam`` along a unit
direction ``u`` and measure the distance between the generated samples and
the target.  Cells ``(replicate, time, magnitude)`` are independent; the
random streams of a cell depend on the replicate and time index but not on
the magnitude, so ``lam = 0`` reproduces the unperturbed baseline exactly and
different magnitudes share noise.
"""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from harrisdiff import __version__
from harrisdiff import rng as rngmod
from harrisdiff.errors import DomainError
from harrisdiff.metrics import EmpiricalCloud, bures_w2, max_sw
from harrisdiff.sampler import ExplicitInit, PerturbationSpec, SamplerConfig, run_chain
from harrisdiff.schedule import Schedule, make_grid
from harrisdiff.target import target_from_dict

log = logging.getLogger("harrisdiff")

METRICS = ("bures_w2", "max_sw")
DIRECTIONS = ("random-unit", "max_sw-worst-case")
EXPERIMENTS = ("init-bias", "score-perturb")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """Settings of one experiment; JSON keys match the field names."""

    experiment: str = "init-bias"
    target: dict = field(default_factory=lambda: {
        "type": "gaussian_preset", "name": "isotropic", "d": 10, "mean": 1.0})
    schedule: dict = field(default_factory=lambda: Schedule.karras().to_dict())
    grid: dict = field(default_factory=lambda: {"n_steps": 100, "spacing": "uniform-in-sigma"})
    times: list = field(default_factory=lambda: [0.05, 0.25, 0.5, 0.75, 1.0])
    steps: list = field(default_factory=lambda: ["first", "last"])
    magnitudes: list = field(default_factory=lambda: [0.0, 5.0, 20.0])
    replicates: int = 5
    n_samples: int = 10000
    metric: str = "bures_w2"
    direction: str = "random-unit"
    init_scale: str = "variance"
    seed: int = 0
    worst_case_samples: int = 10000
    max_sw: dict = field(default_factory=lambda: {
        "step": 1e-3, "tol": 1e-7, "max_iter": 100000, "restarts": 8})
    record_timing: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise DomainError(f"experiment must be one of {EXPERIMENTS}")
        if self.metric not in METRICS:
            raise DomainError(f"metric must be one of {METRICS}")
        if self.direction not in DIRECTIONS:
            raise DomainError(f"direction must be one of {DIRECTIONS}")
        if int(self.replicates) < 1:
            raise DomainError("replicates must be >= 1")
        if int(self.n_samples) < 2:
            raise DomainError("n_samples must be >= 2")
        if any(not float(m) >= 0 for m in self.magnitudes) or not self.magnitudes:
            raise DomainError("magnitudes must be a nonempty list of nonnegative reals")
        if self.init_scale not in ("variance", "std", "none"):
            raise DomainError("init_scale must be 'variance', 'std' or 'none'")

    @classmethod
    def from_dict(cls, obj):
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise DomainError(f"unknown config keys: {sorted(extra)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)

    def build(self):
        """Instantiate ``(target, schedule, grid)``."""
        target = target_from_dict(self.target)
        schedule = Schedule.from_dict(self.schedule)
        grid = make_grid(schedule, int(self.grid.get("n_steps", 100)),
                         self.grid.get("spacing", "uniform-in-t"), self.grid.get("rho"))
        return target, schedule, grid


@dataclass
class ExperimentReport:
    rows: list
    summary: list
    provenance: dict

    ROW_FIELDS = ("replicate", "t", "lambda", "metric", "value", "n_samples", "seconds")
    SUMMARY_FIELDS = ("t", "lambda", "metric", "mean", "std", "n_replicates")

    def write(self, path):
        """Write rows to ``path`` and the summary next to it as ``*.summary.csv``."""
        path = str(path)
        _write_csv(path, self.ROW_FIELDS, self.rows)
        _write_csv(summary_path(path), self.SUMMARY_FIELDS, self.summary)

    def mean(self, t, lam):
        for row in self.summary:
            if row["t"] == t and row["lambda"] == lam:
                return row["mean"]
        raise KeyError((t, lam))

    def std(self, t, lam):
        for row in self.summary:
            if row["t"] == t and row["lambda"] == lam:
                return row["std"]
        raise KeyError((t, lam))


def summary_path(path):
    return path[:-4] + ".summary.csv" if path.endswith(".csv") else path + ".summary.csv"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def worst_case_result(target, m_each, seed, step=1e-3, tol=1e-7, max_iter=100000,
                      restarts=8, threads=1):
    """Max-SW between two independent target clouds of size ``m_each``."""
    if m_each < 2:
        raise DomainError("m_each must be >= 2")
    a = target.sample(m_each, rngmod.stream(seed, rngmod.SALT_DIRECTION, 0))
    b = target.sample(m_each, rngmod.stream(seed, rngmod.SALT_DIRECTION, 1))
    return max_sw(a, b, step=step, tol=tol, max_iter=max_iter, restarts=restarts, seed=seed,
                  threads=threads)


def worst_case_direction(target, m_each, seed, **opts):
    """Unit direction of :func:`worst_case_result`; ``+1`` in one dimension."""
    if m_each < 2:
        raise DomainError("m_each must be >= 2")
    if target.dim == 1:
        return np.ones(1)
    return worst_case_result(target, m_each, seed, **opts).u


def _directions(cfg, target, salt, threads):
    if cfg.direction == "max_sw-worst-case":
        u = worst_case_direction(target, int(cfg.worst_case_samples), cfg.seed,
                                 threads=threads, **cfg.max_sw)
        return [u] * int(cfg.replicates)
    out = []
    for r in range(int(cfg.replicates)):
        v = rngmod.stream(cfg.seed, salt, rngmod.SALT_DIRECTION, r).standard_normal(target.dim)
        out.append(v / np.linalg.norm(v))
    return out


def _distance(cfg, target, samples, ref_seed_salt):
    if cfg.metric == "bures_w2":
        cloud = EmpiricalCloud(samples)
        return bures_w2((cloud.mean, cloud.cov), (target.mean_vector(), target.covariance()))
    ref = target.sample(samples.shape[0], rngmod.stream(cfg.seed, *ref_seed_salt))
    opts = dict(cfg.max_sw)
    return max_sw(samples, ref, seed=cfg.seed, **opts).value


def _forward_samples(target, schedule, t, n, gen):
    fm = schedule.forward_moments(t)
    x0 = target.sample(n, gen)
    return fm.m * x0 + math.sqrt(fm.var) * gen.standard_normal(x0.shape)


def _run(cfg, threads, order=None):
    target, schedule, grid = cfg.build()
    salt = rngmod.label(cfg.experiment)
    M = int(cfg.n_samples)
    mags = [float(m) for m in cfg.magnitudes]
    if cfg.experiment == "init-bias":
        positions = []
        for t in cfg.times:
            t = float(t)
            if not 0 < t <= schedule.horizon:
                raise DomainError(f"perturbation time {t} outside (0, T]")
            k = grid.index_of_forward_time(t)
            if k >= grid.n_steps:
                raise DomainError(f"time {t} snaps to the end of the grid")
            positions.append(k)
        labels = [float(grid.forward_times[k]) for k in positions]
    else:
        positions = []
        for s in cfg.steps:
            k = {"first": 0, "last": grid.n_steps - 1}.get(s, s)
            if int(k) != k or not 0 <= int(k) < grid.n_steps:
                raise DomainError(f"step index {s!r} outside the grid")
            positions.append(int(k))
        labels = positions
    if len(set(positions)) != len(positions):
        raise DomainError("perturbation positions collide on the grid")
    dirs = _directions(cfg, target, salt, threads)
    cells = [(r, i, j) for r in range(int(cfg.replicates))
             for i in range(len(positions)) for j in range(len(mags))]
    if order is not None:
        cells = [cells[c] for c in order]

    def cell(rij):
        r, i, j = rij
        k, lam = positions[i], mags[j]
        started = time.perf_counter()
        try:
            if cfg.experiment == "init-bias":
                gen = rngmod.stream(cfg.seed, salt, rngmod.SALT_TARGET, r, i)
                init = _forward_samples(target, schedule, float(grid.forward_times[k]), M, gen)
                pert = PerturbationSpec("init-bias", dirs[r], lam, float(grid.forward_times[k]),
                                        cfg.init_scale)
                sc = SamplerConfig(schedule, grid, target, init=ExplicitInit(init, k),
                                   perturbation=pert, seed=cfg.seed, salt=(salt, r, i))
                ref_salt = (salt, rngmod.SALT_REFERENCE, r, i)
            else:
                pert = PerturbationSpec("score-step", dirs[r], lam, k)
                sc = SamplerConfig(schedule, grid, target, perturbation=pert, seed=cfg.seed,
                                   salt=(salt, r))
                ref_salt = (salt, rngmod.SALT_REFERENCE, r)
            out = run_chain(sc, M)
            value = _distance(cfg, target, out, ref_salt)
        except Exception as exc:
            raise ExperimentError(f"cell (replicate={r}, t={labels[i]}, lambda={lam}): {exc}") from exc
        seconds = time.perf_counter() - started
        log.info("cell r=%d t=%s lambda=%g %s=%.6g (%.2fs)", r, labels[i], lam, cfg.metric,
                 value, seconds)
        return (r, i, j), value, seconds

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(cell, cells))
    else:
        results = [cell(c) for c in cells]
    results.sort(key=lambda res: res[0])

    rows = []
    for (r, i, j), value, seconds in results:
        rows.append({
            "replicate": r, "t": labels[i], "lambda": mags[j], "metric": cfg.metric,
            "value": float(value), "n_samples": M,
            "seconds": round(seconds, 3) if cfg.record_timing else None,
        })
    summary = []
    for i, lab in enumerate(labels):
        for j, lam in enumerate(mags):
            vals = np.array([row["value"] for row in rows if row["t"] == lab and row["lambda"] == lam])
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
            summary.append({"t": lab, "lambda": lam, "metric": cfg.metric,
                            "mean": float(np.mean(vals)), "std": std, "n_replicates": len(vals)})
    provenance = {
        "config": cfg.to_dict(),
        "version": __version__,
        "seed": cfg.seed,
        "estimator": ("bures_w2 of sample mean/covariance against exact target moments"
                      if cfg.metric == "bures_w2"
                      else "max_sw against fresh target samples of the same size"),
        "optimizer": "normalized projected gradient ascent",
        "init_scale": cfg.init_scale if cfg.experiment == "init-bias" else None,
        "score_scale": "lambda / var(t_err)" if cfg.experiment == "score-perturb" else None,
        "grid_positions": positions,
        "target_metadata": getattr(target, "metadata", {}),
    }
    return ExperimentReport(rows, summary, provenance)


def run_init_bias(cfg, threads=1, order=None):
    """Start from the forward marginal at each ``t_bias``, shifted by ``scale * lam * u``.

    ``scale`` follows ``cfg.init_scale``; ``t_bias`` values are snapped to the
    nearest grid point and reported at the snapped value.
    """
    if cfg.experiment != "init-bias":
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": "init-bias"})
    return _run(cfg, threads, order)


def run_score_perturb(cfg, threads=1, order=None):
    """Full reverse chain from ``pi_infty`` with the score perturbed at one step.

    The ``t`` column holds the perturbed step index.
    """
    if cfg.experiment != "score-perturb":
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": "score-perturb"})
    return _run(cfg, threads, order)
