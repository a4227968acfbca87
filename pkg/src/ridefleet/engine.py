"""Fixed-step simulation loop, KPI recording and result files.

Per step, in order: inject new requests, operator assignment, vehicle
moves, traveller updates, KPI record.  Step ``k`` starts at ``k * dt``;
a request is injected at the first step starting at or after its
request time.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .agents import (
    Operator,
    Traveller,
    TravellerState,
    Vehicle,
    VehicleState,
    enqueue_request,
    fifo_assign,
    traveller_step,
    vehicle_step,
)
from .errors import ValidationError
from .queueing import utilization_with_pickup

log = logging.getLogger(__name__)

TRACE_HEADER = ["step", "queue_length", "idle_count", "busy_count"]
TRAVELLER_HEADER = ["id", "request_time_s", "assignment_wait_s", "pickup_wait_s",
                    "trip_time_s", "served_flag"]


@dataclass(frozen=True)
class SimConfig:
    fleet_size: int
    horizon_s: float = 3 * 3600.0
    dt: float = 1.0
    rng_seed: int = 0
    dwell_load_s: float = 0.0
    dwell_unload_s: float = 0.0
    prefilter_k: int = 16
    vehicle_init: str = "uniform_nodes"  # or "listed"
    vehicle_nodes: tuple[int, ...] | None = None  # node ids when listed
    tail_window_s: float | None = None  # default: final third of the horizon

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.fleet_size < 0 or int(self.fleet_size) != self.fleet_size:
            raise ValidationError("fleet_size must be a non-negative integer")
        n = self.horizon_s / self.dt
        if self.horizon_s <= 0 or abs(n - round(n)) > 1e-9:
            raise ValidationError("horizon must be a positive multiple of dt")
        if self.dwell_load_s < 0 or self.dwell_unload_s < 0:
            raise ValidationError("dwell times must be non-negative")
        if self.prefilter_k < 0:
            raise ValidationError("prefilter_k must be >= 0")
        if self.vehicle_init not in ("uniform_nodes", "listed"):
            raise ValidationError(f"unknown vehicle_init {self.vehicle_init!r}")
        if self.vehicle_init == "listed" and (
                self.vehicle_nodes is None or len(self.vehicle_nodes) != self.fleet_size):
            raise ValidationError("listed vehicle_init needs one node per vehicle")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.dt))

    @property
    def window_s(self) -> float:
        return self.horizon_s / 3 if self.tail_window_s is None else self.tail_window_s

    def to_dict(self):
        d = asdict(self)
        if d["vehicle_nodes"] is not None:
            d["vehicle_nodes"] = list(d["vehicle_nodes"])
        return d


@dataclass
class TravellerRecord:
    id: int
    request_time_s: float
    assignment_wait_s: float | None
    pickup_wait_s: float | None
    trip_time_s: float | None
    served: bool

    @property
    def t_assigned(self):
        if self.assignment_wait_s is None:
            return None
        return self.request_time_s + self.assignment_wait_s


@dataclass
class KpiTrace:
    queue_length: np.ndarray
    idle_count: np.ndarray
    busy_count: np.ndarray
    arrivals: np.ndarray
    assignments: np.ndarray
    travellers: list[TravellerRecord] = field(default_factory=list)
    odometer_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trips_served: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class SimResult:
    config: SimConfig
    trace: KpiTrace
    summary: dict

    @property
    def served(self):
        return [r for r in self.trace.travellers if r.served]


class ServiceParams(NamedTuple):
    t_bar_h: float
    t_bar_p_h: float
    lam_per_h: float


def empirical_service_params(result: SimResult, tail_window_s: float | None = None) -> ServiceParams:
    """Measured mean trip time, tail-window pickup wait and arrival rate.

    Pickup waits count for travellers assigned within the final
    ``tail_window_s`` seconds of the horizon.
    """
    cfg = result.config
    served = result.served
    if not served:
        raise ValidationError("no served travellers")
    window = cfg.window_s if tail_window_s is None else tail_window_s
    start = cfg.horizon_s - window
    tail = [r.pickup_wait_s for r in served if r.t_assigned >= start]
    if not tail:
        raise ValidationError(f"no served travellers assigned in the final {window} s")
    n_req = sum(1 for r in result.trace.travellers if r.request_time_s < cfg.horizon_s)
    return ServiceParams(
        float(np.mean([r.trip_time_s for r in served])) / 3600.0,
        float(np.mean(tail)) / 3600.0,
        n_req / (cfg.horizon_s / 3600.0),
    )


def _initial_nodes(network, config: SimConfig) -> list[int]:
    if config.vehicle_init == "listed":
        return [network.node_index(n) for n in config.vehicle_nodes]
    rng = np.random.default_rng(config.rng_seed)
    return rng.integers(len(network.nodes), size=config.fleet_size).tolist()


def run_simulation(network, requests, config: SimConfig) -> SimResult:
    requests = list(requests)
    for a, b in zip(requests, requests[1:]):
        if b.request_time < a.request_time:
            raise ValidationError(f"requests not sorted by time at id {b.id}")
    for r in requests:
        if r.origin not in network.index or r.destination not in network.index:
            raise ValidationError(f"request {r.id} has an OD node outside the network")
    if requests and requests[-1].request_time >= config.horizon_s:
        log.warning("horizon %.0f s ends before the last request (%.0f s)",
                    config.horizon_s, requests[-1].request_time)

    # infrastructure first, then agents
    dt = config.dt
    operator = Operator(0, range(config.fleet_size), dt)
    vehicles = [Vehicle(i, node, dwell_load_s=config.dwell_load_s,
                        dwell_unload_s=config.dwell_unload_s)
                for i, node in enumerate(_initial_nodes(network, config))]
    travellers: dict[int, Traveller] = {}

    n = config.n_steps
    queue_length = np.zeros(n, dtype=int)
    idle_count = np.zeros(n, dtype=int)
    arrivals = np.zeros(n, dtype=int)
    assignments = np.zeros(n, dtype=int)
    idle = config.fleet_size
    ptr = 0
    IDLE = VehicleState.IDLE

    for step in range(n):
        now = step * dt
        while ptr < len(requests) and requests[ptr].request_time <= now + 1e-9:
            tr = Traveller(requests[ptr])
            travellers[tr.id] = tr
            enqueue_request(operator, tr)
            ptr += 1
            arrivals[step] += 1

        pairs = fifo_assign(operator, network, vehicles, now, config.prefilter_k)
        assignments[step] = len(pairs)
        idle -= len(pairs)

        for v in vehicles:
            if v.state is not IDLE:
                for ev in vehicle_step(v, network, dt, now):
                    traveller_step(travellers[ev.traveller_id], (ev,))
                    if ev.kind == "dropoff":
                        idle += 1

        queue_length[step] = len(operator.fifo_queue)
        idle_count[step] = idle

    records = []
    for r in requests:
        tr = travellers.get(r.id)
        if tr is None:
            records.append(TravellerRecord(r.id, r.request_time, None, None, None, False))
            continue
        served = tr.state is TravellerState.SERVED
        records.append(TravellerRecord(
            r.id, r.request_time, tr.assignment_wait,
            tr.pickup_wait if served else None,
            tr.trip_time if served else None, served))

    trace = KpiTrace(queue_length, idle_count, config.fleet_size - idle_count, arrivals, assignments,
                     records, np.array([v.odometer_m for v in vehicles]),
                     np.array([v.trips_served for v in vehicles], dtype=int))
    result = SimResult(config, trace, {})
    result.summary = summarize(result)
    return result


def _stat(values, fn):
    return float(fn(values)) if len(values) else None


def summarize(result: SimResult) -> dict:
    cfg, tr = result.config, result.trace
    served = result.served
    n_served = len(served)
    assigned = sum(1 for r in tr.travellers if r.assignment_wait_s is not None)
    pickups = [r.pickup_wait_s for r in served]
    try:
        params = empirical_service_params(result)
        rho = utilization_with_pickup(params.lam_per_h, cfg.fleet_size, params.t_bar_h, params.t_bar_p_h) \
            if cfg.fleet_size > 0 else None
        t_bar_h, t_bar_p_h = params.t_bar_h, params.t_bar_p_h
    except ValidationError:
        rho = t_bar_h = t_bar_p_h = None
    return {
        "fleet_size": cfg.fleet_size,
        "seed": cfg.rng_seed,
        "total_requests": len(tr.travellers),
        "served": n_served,
        "in_flight": assigned - n_served,
        "unserved": len(tr.travellers) - assigned,
        "mean_queue_length": _stat(tr.queue_length, np.mean),
        "max_queue_length": int(tr.queue_length.max()) if len(tr.queue_length) else 0,
        "mean_assignment_wait_s": _stat([r.assignment_wait_s for r in served], np.mean),
        "mean_pickup_wait_s": _stat(pickups, np.mean),
        "max_pickup_wait_s": _stat(pickups, np.max),
        "mean_trip_time_s": _stat([r.trip_time_s for r in served], np.mean),
        "t_bar_h": t_bar_h,
        "t_bar_p_tail_h": t_bar_p_h,
        "empirical_rho": rho,
        "total_odometer_m": float(tr.odometer_m.sum()),
        "config": cfg.to_dict(),
    }


# -- result files ------------------------------------------------------------

def _fmt(x):
    return "" if x is None else repr(float(x))


def _parse(s):
    return None if s == "" else float(s)


def write_result(result: SimResult, out_dir) -> None:
    """Write ``trace.csv``, ``travellers.csv`` and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = result.trace
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(len(tr.queue_length)):
            w.writerow([k, int(tr.queue_length[k]), int(tr.idle_count[k]), int(tr.busy_count[k])])
    with open(out / "travellers.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAVELLER_HEADER)
        for r in tr.travellers:
            w.writerow([r.id, _fmt(r.request_time_s), _fmt(r.assignment_wait_s),
                        _fmt(r.pickup_wait_s), _fmt(r.trip_time_s), int(r.served)])
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")


def read_result(out_dir) -> SimResult:
    """Inverse of :func:`write_result`.  Arrivals, assignments and per-vehicle
    data are not stored, so they come back empty."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    cfg_d = dict(summary["config"])
    if cfg_d.get("vehicle_nodes") is not None:
        cfg_d["vehicle_nodes"] = tuple(cfg_d["vehicle_nodes"])
    config = SimConfig(**cfg_d)
    with open(out / "trace.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != TRACE_HEADER:
        raise ValidationError("trace.csv has an unexpected header")
    body = np.array([[int(x) for x in row] for row in rows[1:]], dtype=int).reshape(-1, 4)
    records = []
    with open(out / "travellers.csv", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != TRAVELLER_HEADER:
            raise ValidationError("travellers.csv has an unexpected header")
        for row in reader:
            records.append(TravellerRecord(int(row[0]), float(row[1]), _parse(row[2]),
                                           _parse(row[3]), _parse(row[4]), row[5] == "1"))
    trace = KpiTrace(body[:, 1], body[:, 2], body[:, 3],
                     np.zeros(0, dtype=int), np.zeros(0, dtype=int), records)
    return SimResult(config, trace, summary)
