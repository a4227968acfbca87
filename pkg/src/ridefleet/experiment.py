"""Fleet-size sweeps, queue stability verdicts and critical fleet size search."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import SimConfig, SimResult, run_simulation
from .errors import BracketError, ValidationError
from .queueing import PickupModel, min_fleet_fluid, utilization_with_pickup

log = logging.getLogger(__name__)

SWEEP_HEADER = ["fleet_size", "replication", "seed", "stable", "tail_mean_queue",
                "tail_slope_per_h", "tail_mean_pickup_wait_s", "tail_max_pickup_wait_s",
                "tail_mean_assignment_wait_s", "empirical_rho", "served", "unserved",
                "in_flight", "error"]


@dataclass(frozen=True)
class StabilityVerdict:
    fleet_size: int | None
    stable: bool
    tail_mean_queue: float
    tail_slope_per_h: float
    slope_tol: float
    level_bound: float
    tail_mean_pickup_wait_s: float | None = None
    tail_max_pickup_wait_s: float | None = None
    tail_mean_assignment_wait_s: float | None = None
    empirical_rho: float | None = None
    replication: int = 0
    seed: int | None = None


def detect_stability(queue_length, lam_per_h: float, dt: float, window_s: float,
                     slope_tol: float | None = None, level_factor: float = 3.0,
                     fleet_size: int | None = None) -> StabilityVerdict:
    """Classify a queue-length trace as stable or unstable.

    Stable iff over the final ``window_s`` seconds (a) the least-squares
    slope is at most ``slope_tol`` requests per hour (default 5% of the
    arrival rate) and (b) the mean queue is at most
    ``level_factor * lam * dt`` (arrivals per step).
    """
    q = np.asarray(getattr(queue_length, "queue_length", queue_length), dtype=float)
    n = int(round(window_s / dt))
    if n < 2 or n > len(q):
        raise ValidationError(f"window of {n} steps does not fit a trace of {len(q)} steps")
    tol = 0.05 * lam_per_h if slope_tol is None else slope_tol
    bound = level_factor * lam_per_h / 3600.0 * dt
    tail = q[-n:]
    hours = np.arange(n) * dt / 3600.0
    slope = float(np.polyfit(hours, tail, 1)[0])
    mean = float(tail.mean())
    return StabilityVerdict(fleet_size, slope <= tol and mean <= bound, mean, slope, tol, bound)


def assess(result: SimResult, lam_per_h: float, window_s: float | None = None,
           slope_tol: float | None = None, level_factor: float = 3.0,
           replication: int = 0) -> StabilityVerdict:
    """Stability verdict plus the tail-window wait statistics of one run."""
    cfg = result.config
    window = cfg.window_s if window_s is None else window_s
    v = detect_stability(result.trace.queue_length, lam_per_h, cfg.dt, window,
                         slope_tol, level_factor, cfg.fleet_size)
    start = cfg.horizon_s - window
    recs = result.trace.travellers
    pick = [r.pickup_wait_s for r in recs if r.served and r.t_assigned >= start]
    # unassigned tail requests enter with their censored wait so far
    assign = [r.assignment_wait_s if r.assignment_wait_s is not None else cfg.horizon_s - r.request_time_s
              for r in recs if start <= r.request_time_s < cfg.horizon_s]
    served = result.served
    rho = None
    if pick and served and cfg.fleet_size > 0:
        t_bar = float(np.mean([r.trip_time_s for r in served])) / 3600.0
        rho = utilization_with_pickup(lam_per_h, cfg.fleet_size, t_bar, float(np.mean(pick)) / 3600.0)
    return replace(
        v,
        tail_mean_pickup_wait_s=float(np.mean(pick)) if pick else None,
        tail_max_pickup_wait_s=float(np.max(pick)) if pick else None,
        tail_mean_assignment_wait_s=float(np.mean(assign)) if assign else None,
        empirical_rho=rho,
        replication=replication,
        seed=cfg.rng_seed,
    )


def derive_seed(base_seed: int, fleet_size: int, replication: int = 0) -> int:
    """Deterministic per-run seed from (base seed, fleet size, replication)."""
    ss = np.random.SeedSequence([int(base_seed), int(fleet_size), int(replication)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class SweepSpec:
    network: object
    requests: list
    sizes: object = "bisect"  # list of ints, (min, max, stride) or "bisect"
    base_config: SimConfig = field(default_factory=lambda: SimConfig(0))
    window_s: float | None = None
    slope_tol: float | None = None
    level_factor: float = 3.0
    replications: int = 1
    workers: int = 1
    keep_results: bool = False  # hold full SimResults (traces) in memory

    def fleet_sizes(self) -> list[int]:
        s = self.sizes
        if isinstance(s, str):
            raise ValidationError("bisect specs have no explicit size list")
        if isinstance(s, tuple) and len(s) == 3:
            lo, hi, stride = s
            if stride <= 0:
                raise ValidationError("stride must be positive")
            s = list(range(lo, hi + 1, stride))
        sizes = sorted(set(int(c) for c in s))
        if not sizes:
            raise ValidationError("sweep needs at least one fleet size")
        if sizes[0] < 1:
            raise ValidationError("fleet sizes must be positive")
        return sizes

    @property
    def lam_per_h(self) -> float:
        h = self.base_config.horizon_s
        return sum(1 for r in self.requests if r.request_time < h) / (h / 3600.0)

    def validate(self):
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        w = self.window_s if self.window_s is not None else self.base_config.window_s
        if not 0 < w <= self.base_config.horizon_s:
            raise ValidationError("stability window must lie within the horizon")


def _run_one(spec: SweepSpec, size: int, rep: int):
    cfg = replace(spec.base_config, fleet_size=size,
                  rng_seed=derive_seed(spec.base_config.rng_seed, size, rep))
    result = run_simulation(spec.network, spec.requests, cfg)
    verdict = assess(result, spec.lam_per_h, spec.window_s, spec.slope_tol, spec.level_factor, rep)
    return verdict, result.summary, result if spec.keep_results else None


def _run_job(args):
    spec, size, rep = args
    try:
        return size, rep, *_run_one(spec, size, rep), None
    except Exception as exc:  # reported per size, the sweep carries on
        log.exception("run failed for fleet size %d", size)
        return size, rep, None, None, None, f"{type(exc).__name__}: {exc}"


@dataclass
class SweepResult:
    verdicts: list[StabilityVerdict]
    summaries: dict  # (size, replication) -> run summary
    errors: dict  # (size, replication) -> message
    results: dict = field(default_factory=dict)  # (size, replication) -> SimResult

    def stable_sizes(self) -> dict[int, bool]:
        by_size: dict[int, bool] = {}
        for v in self.verdicts:
            by_size[v.fleet_size] = by_size.get(v.fleet_size, True) and v.stable
        return dict(sorted(by_size.items()))

    def monotonicity_violations(self) -> list[tuple[int, int]]:
        """(stable size, larger unstable size) pairs."""
        items = list(self.stable_sizes().items())
        return [(a, b) for i, (a, sa) in enumerate(items) if sa
                for b, sb in items[i + 1:] if not sb]


def sweep(spec: SweepSpec, out_dir=None) -> SweepResult:
    spec.validate()
    jobs = [(spec, c, r) for c in spec.fleet_sizes() for r in range(spec.replications)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = [_run_job(j) for j in jobs]
    outcomes.sort(key=lambda o: (o[0], o[1]))
    res = SweepResult([], {}, {})
    for size, rep, verdict, summary, result, err in outcomes:
        if err is not None:
            res.errors[(size, rep)] = err
        else:
            res.verdicts.append(verdict)
            res.summaries[(size, rep)] = summary
            if result is not None:
                res.results[(size, rep)] = result
    if out_dir is not None:
        write_sweep(res, out_dir)
    return res


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return int(x)
    if isinstance(x, float):
        return repr(x)
    return x


def write_sweep(res: SweepResult, out_dir, extra: dict | None = None) -> None:
    """``sweep.csv`` (one row per run) and ``sweep_summaries.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {(v.fleet_size, v.replication): v for v in res.verdicts}
    keys = sorted(set(rows) | set(res.errors))
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for key in keys:
            if key in res.errors:
                w.writerow([key[0], key[1]] + [""] * (len(SWEEP_HEADER) - 3) + [res.errors[key]])
                continue
            v, s = rows[key], res.summaries[key]
            w.writerow([_cell(x) for x in (
                v.fleet_size, v.replication, v.seed, v.stable, v.tail_mean_queue, v.tail_slope_per_h,
                v.tail_mean_pickup_wait_s, v.tail_max_pickup_wait_s, v.tail_mean_assignment_wait_s,
                v.empirical_rho, s["served"], s["unserved"], s["in_flight"], None)])
    doc = {"runs": [{"fleet_size": k[0], "replication": k[1], "verdict": asdict(rows[k]),
                     "summary": res.summaries[k]} for k in keys if k in rows]}
    if extra:
        doc.update(extra)
    (out / "sweep_summaries.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


# -- critical fleet size -------------------------------------------------------

def mean_trip_time_h(network, requests) -> float:
    """Mean routed travel time of the requests' OD pairs, in hours."""
    if not requests:
        raise ValidationError("no requests")
    total = 0.0
    for r in requests:
        total += network.astar_idx(network.node_index(r.origin), network.node_index(r.destination))[2]
    return total / len(requests) / 3600.0


def fluid_fleet_estimate(spec: SweepSpec, psi: float = 1.0, dt_h: float | None = None) -> int:
    """min_fleet_fluid with the network's area, circuity and mean speed.

    The fluid grid defaults to the simulation step so both models resolve
    time alike.
    """
    net, cfg = spec.network, spec.base_config
    model = PickupModel(net.area_km2, net.circuity_phi, net.mean_speed_kmh, psi)
    dt = cfg.dt / 3600.0 if dt_h is None else dt_h
    return min_fleet_fluid(spec.lam_per_h, mean_trip_time_h(net, spec.requests), model,
                           dt=dt, horizon=cfg.horizon_s / 3600.0)


@dataclass
class CriticalSize:
    c_star: int  # smallest tested stable size
    c_unstable: int  # largest tested unstable size
    tested: dict  # size -> StabilityVerdict (or bool from a test double)
    sweep: SweepResult | None = None

    @property
    def bracket(self):
        return (self.c_unstable, self.c_star)


def find_critical_fleet_size(spec: SweepSpec, c_lo: int | None = None, c_hi: int | None = None,
                             stability: Callable[[int], object] | None = None,
                             out_dir=None) -> CriticalSize:
    """Bisect on fleet size between an unstable ``c_lo`` and a stable ``c_hi``.

    Defaults: ``c_lo = ceil(lam * t_bar)``, ``c_hi = 2 * fluid estimate``.
    ``stability`` replaces the simulation with any callable size -> bool
    (or -> verdict), which tests use as a double.
    """
    log_res = SweepResult([], {}, {})
    tested: dict[int, object] = {}

    if stability is None:
        spec.validate()

        def stability(c):
            verdicts = []
            for rep in range(spec.replications):
                _, _, verdict, summary, result, err = _run_job((spec, c, rep))
                if err is not None:
                    raise RuntimeError(f"fleet size {c}: {err}")
                log_res.verdicts.append(verdict)
                log_res.summaries[(c, rep)] = summary
                if result is not None:
                    log_res.results[(c, rep)] = result
                verdicts.append(verdict)
            log.info("fleet size %d: %s", c, "stable" if all(v.stable for v in verdicts) else "unstable")
            return verdicts[0] if len(verdicts) == 1 else all(v.stable for v in verdicts)

        if c_lo is None:
            c_lo = math.ceil(spec.lam_per_h * mean_trip_time_h(spec.network, spec.requests))
        if c_hi is None:
            c_hi = 2 * fluid_fleet_estimate(spec)
    if c_lo is None or c_hi is None or not 0 <= c_lo < c_hi:
        raise ValidationError(f"invalid bracket ({c_lo}, {c_hi})")

    def check(c):
        v = stability(c)
        tested[c] = v
        return v if isinstance(v, bool) else v.stable

    lo_stable, hi_stable = check(c_lo), check(c_hi)
    if lo_stable or not hi_stable:
        raise BracketError(f"bracket verdicts inverted: c_lo={c_lo} stable={lo_stable}, "
                           f"c_hi={c_hi} stable={hi_stable}", low=tested[c_lo], high=tested[c_hi])
    lo, hi = c_lo, c_hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if check(mid):
            hi = mid
        else:
            lo = mid
    crit = CriticalSize(hi, lo, dict(sorted(tested.items())), log_res if log_res.verdicts else None)
    if out_dir is not None and crit.sweep is not None:
        write_sweep(crit.sweep, out_dir, {"critical": {"c_star": hi, "c_unstable": lo,
                                                       "c_lo": c_lo, "c_hi": c_hi}})
    return crit


# -- pickup wait model vs simulation ------------------------------------------

def pickup_row(instance: str, V: float, t_p_model_min: float, t_p_sim_min: float) -> dict:
    """One row of the model-vs-simulation table; error relative to simulation."""
    return {
        "instance": instance,
        "V": V,
        "t_p_model_min": t_p_model_min,
        "t_p_sim_min": t_p_sim_min,
        "abs_error_pct": abs(t_p_model_min - t_p_sim_min) / t_p_sim_min * 100.0,
    }


def compare_pickup_model(result: SimResult, params, instance: str = "",
                         window_s: float | None = None) -> dict:
    """Compare the closed-form pickup wait with an unstable run's tail waits.

    The simulated value is the steady (mean) tail pickup wait, the level
    the wait settles at once idle vehicles are scarce.

    ``V`` is the arrival rate per second, the idle-vehicle level an
    unstable queue settles at.  ``params`` is a QueueParams carrying area,
    phi, psi and v_bar.
    """
    cfg = result.config
    window = cfg.window_s if window_s is None else window_s
    start = cfg.horizon_s - window
    tail = [r.pickup_wait_s for r in result.served if r.t_assigned >= start]
    if not tail:
        raise ValidationError("no pickup waits recorded in the tail window")
    V = params.lam / 3600.0
    model_min = params.pickup_model()(V) * 60.0
    row = pickup_row(instance, V, model_min, float(np.mean(tail)) / 60.0)
    # the single worst wait is reported alongside but not compared
    row["t_p_sim_worst_min"] = float(np.max(tail)) / 60.0
    return row


def grid_city(rows: int = 40, cols: int = 40, block_m: float = 205.0, speed_kmh: float = 25.0,
              lam_per_h: float = 1000.0, horizon_h: float = 3.0, seed: int = 0):
    """Synthetic test city: Manhattan grid plus uniform Poisson demand."""
    from .demand import make_requests, sample_arrival_times, sample_od_uniform
    from .network import generate_grid

    net = generate_grid(rows, cols, block_m, speed_kmh)
    times = sample_arrival_times(lam_per_h, horizon_h, derive_seed(seed, 0, 1))
    pairs = sample_od_uniform(net, derive_seed(seed, 0, 2), len(times))
    return net, make_requests(times, pairs)
