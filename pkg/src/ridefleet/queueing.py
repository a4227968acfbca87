"""Analytic M/M/c toolkit for fleet sizing.

Erlang quantities are evaluated in log space through lgamma and the
regularized incomplete gamma function, so fleets of a million vehicles are
no problem.  Rates are per hour and times are in hours throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit, gammaincc, gammaln

from .errors import BracketError, UnstableQueueError, ValidationError

# mean distance between two uniform points in a unit square, rounded
SQUARE_MEAN_DISTANCE = 0.52


def _check_c_rho(c, rho):
    if int(c) != c or c < 1:
        raise ValidationError(f"server count must be an integer >= 1, got {c}")
    if not 0 < rho < 1:
        raise UnstableQueueError(f"utilization must lie in (0, 1), got {rho}")


def utilization(lam: float, c: float, mu: float) -> float:
    return lam / (c * mu)


class FleetBase(NamedTuple):
    offered_load: float  # lambda / mu, the continuous critical size
    ceiling: int
    smallest_stable: int  # smallest integer c with rho < 1


def min_fleet_base(lam: float, mu: float) -> FleetBase:
    a = lam / mu
    ceil = math.ceil(a)
    return FleetBase(a, ceil, ceil + 1 if ceil == a else ceil)


def log_erlang_f(c: int, rho: float) -> float:
    """log of c!/(c rho)^c * sum_{m<c} (c rho)^m / m!, via the Poisson CDF."""
    _check_c_rho(c, rho)
    a = c * rho
    # P(Poisson(a) <= c-1) == Q(c, a), the regularized upper incomplete gamma
    return float(gammaln(c + 1) - c * math.log(a) + a + math.log(gammaincc(c, a)))


def erlang_f(c: int, rho: float) -> float:
    return math.exp(log_erlang_f(c, rho))


def erlang_c_delay_prob(c: int, rho: float) -> float:
    """Probability that an arriving request finds every server busy."""
    _check_c_rho(c, rho)
    x = math.log1p(-rho) + log_erlang_f(c, rho)
    return float(expit(-x))


def log_p0_empty(c: int, rho: float) -> float:
    _check_c_rho(c, rho)
    a = c * rho
    log_head = a + math.log(gammaincc(c, a))  # log sum_{m<c} a^m/m!
    log_tail = c * math.log(a) - gammaln(c + 1) - math.log1p(-rho)
    return float(-np.logaddexp(log_head, log_tail))


def p0_empty(c: int, rho: float) -> float:
    """Probability of an empty system (no request queued or in service)."""
    return math.exp(log_p0_empty(c, rho))


def queue_length_lq(c: int, rho: float) -> float:
    return erlang_c_delay_prob(c, rho) * rho / (1 - rho)


class Waits(NamedTuple):
    wq: float
    w: float
    l: float


def waits(lam: float, mu: float, lq: float) -> Waits:
    """Little's law: Wq = Lq/lambda, W = Wq + 1/mu, L = lambda W."""
    wq = lq / lam
    w = wq + 1 / mu
    return Waits(wq, w, lam * w)


@dataclass(frozen=True)
class QueueParams:
    lam: float  # requests per hour
    t_bar: float  # mean trip time, hours
    c: int = 1
    area: float | None = None  # km^2
    phi: float = 1.0
    psi: float = 1.0
    v_bar: float | None = None  # km/h
    t_bar_p: float | None = None  # steady-state pickup wait, hours

    def __post_init__(self):
        if not (self.lam > 0 and self.t_bar > 0):
            raise ValidationError("lam and t_bar must be positive")
        if int(self.c) != self.c or self.c < 1:
            raise ValidationError("c must be an integer >= 1")
        if not 0 < self.psi <= 1:
            raise ValidationError("psi must lie in (0, 1]")
        if self.phi < 1:
            raise ValidationError("phi must be >= 1")
        for name in ("area", "v_bar"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"{name} must be positive")
        if self.t_bar_p is not None and self.t_bar_p < 0:
            raise ValidationError("t_bar_p must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "QueueParams":
        aliases = {"lambda": "lam", "lambda_per_h": "lam"}
        known = {f for f in cls.__dataclass_fields__}
        kw = {}
        for k, v in d.items():
            k = aliases.get(k, k)
            if k not in known:
                raise ValidationError(f"unknown queue parameter {k!r}")
            kw[k] = v
        return cls(**kw)

    def pickup_model(self) -> "PickupModel":
        if self.area is None or self.v_bar is None:
            raise ValidationError("pickup model needs area and v_bar")
        return PickupModel(self.area, self.phi, self.v_bar, self.psi)


@dataclass(frozen=True)
class QueueMetrics:
    mu: float
    rho: float
    offered_load: float
    erlang_c: float
    p0_empty: float
    lq: float
    l: float
    wq: float
    w: float
    max_pickup_wait_h: float | None = None  # idle vehicles = arrivals per second

    def to_dict(self):
        return asdict(self)


def queue_metrics(p: QueueParams) -> QueueMetrics:
    """Full M/M/c evaluation; uses the pickup-adjusted service time when
    ``t_bar_p`` is given."""
    t_p = p.t_bar_p or 0.0
    mu = service_rate_with_pickup(p.t_bar, t_p)
    rho = utilization(p.lam, p.c, mu)
    _check_c_rho(p.c, rho)
    lq = queue_length_lq(p.c, rho)
    wq, w, l = waits(p.lam, mu, lq)
    tp_model = None
    if p.area is not None and p.v_bar is not None:
        tp_model = pickup_wait(p.area, p.psi, p.lam / 3600.0, p.phi, p.v_bar)
    return QueueMetrics(mu, rho, p.lam / mu, erlang_c_delay_prob(p.c, rho),
                        p0_empty(p.c, rho), lq, l, wq, w, tp_model)


def pickup_wait(area_km2: float, psi: float, V: float, phi: float, v_bar_kmh: float) -> float:
    """Mean pickup wait in hours with ``V`` idle vehicles spread over the area."""
    if not V > 0:
        raise ValidationError("idle vehicle count must be positive")
    if not 0 < psi <= 1:
        raise ValidationError("psi must lie in (0, 1]")
    if not (area_km2 > 0 and phi > 0 and v_bar_kmh > 0):
        raise ValidationError("area, phi and speed must be positive")
    return SQUARE_MEAN_DISTANCE * phi / v_bar_kmh * math.sqrt(area_km2 / (psi * V))


@dataclass(frozen=True)
class PickupModel:
    area_km2: float
    phi: float
    v_bar_kmh: float
    psi: float = 1.0

    def __call__(self, V: float) -> float:
        return pickup_wait(self.area_km2, self.psi, V, self.phi, self.v_bar_kmh)


def service_rate_with_pickup(t_bar: float, t_bar_p: float) -> float:
    if not (t_bar > 0 and t_bar_p >= 0):
        raise ValidationError("t_bar must be positive and t_bar_p non-negative")
    return 1.0 / (t_bar + t_bar_p)


def utilization_with_pickup(lam: float, c: float, t_bar: float, t_bar_p: float) -> float:
    if not (t_bar > 0 and t_bar_p >= 0):
        raise ValidationError("t_bar must be positive and t_bar_p non-negative")
    return lam / c * (t_bar + t_bar_p)


# -- fluid model of idle vehicles ------------------------------------------

_EPS = 1e-9


@dataclass
class FluidTrace:
    """Idle-vehicle balance per step; index 0 holds the initial state."""

    V: np.ndarray
    V_in: np.ndarray
    V_out: np.ndarray
    feasible_steps: np.ndarray
    in_flight: np.ndarray
    pickup_h: np.ndarray
    dt_h: float

    @property
    def feasible(self) -> bool:
        return bool(self.feasible_steps.all())

    def write_csv(self, file_path):
        with open(file_path, "w", encoding="utf-8") as fh:
            fh.write("step,V_t,V_in,V_out,feasible_flag\n")
            for t in range(len(self.V)):
                fh.write(f"{t},{float(self.V[t])!r},{float(self.V_in[t])!r},{float(self.V_out[t])!r},"
                         f"{int(self.feasible_steps[t])}\n")


def _steps(x: float, dt: float) -> int:
    # nearest step, ties upward
    return int(math.floor(round(x / dt, 9) + 0.5))


def fluid_recursion(lam: float, t_bar: float, pickup_model: Callable[[float], float] | None,
                    V0: float, dt: float = 1 / 60, horizon: float = 3.0) -> FluidTrace:
    """Deterministic idle-vehicle recursion V_t = V_{t-1} + V_in_t - V_out_t.

    Each step ``lam*dt`` vehicles are dispatched from the idle pool (when
    available); the cohort returns after ``pickup_model(V) + t_bar`` hours,
    where ``V`` is the idle count available at dispatch.  ``pickup_model``
    of None means zero pickup time.  All times in hours.
    """
    if V0 < 0:
        raise ValidationError("V0 must be non-negative")
    if not (lam > 0 and t_bar > 0 and dt > 0 and horizon > 0):
        raise ValidationError("lam, t_bar, dt and horizon must be positive")
    n = _steps(horizon, dt)
    if abs(n * dt - horizon) > 1e-9 * horizon:
        raise ValidationError("dt must divide the horizon")
    demand = lam * dt
    V = np.zeros(n + 1)
    V_in = np.zeros(n + 1)
    V_out = np.zeros(n + 1)
    ok = np.ones(n + 1, dtype=bool)
    in_flight = np.zeros(n + 1)
    tp = np.zeros(n + 1)
    returns = np.zeros(n + 1)  # returns[s]: vehicles becoming idle at step s
    V[0] = V0
    flying = 0.0
    for t in range(1, n + 1):
        V_in[t] = returns[t]
        flying -= returns[t]
        avail = V[t - 1] + V_in[t]
        out = demand
        if avail < demand - _EPS:
            ok[t] = False
            out = max(avail, 0.0)
        if out > 0:
            tp[t] = pickup_model(avail) if pickup_model is not None else 0.0
            back = t + max(1, _steps(tp[t] + t_bar, dt))
            if back <= n:
                returns[back] += out
            flying += out
        V_out[t] = out
        V[t] = avail - out
        in_flight[t] = flying
    return FluidTrace(V, V_in, V_out, ok, in_flight, tp, dt)


def min_fleet_fluid(lam: float, t_bar: float, pickup_model: Callable[[float], float] | None,
                    dt: float = 1 / 60, horizon: float = 3.0) -> int:
    """Smallest integer V0 that keeps the fluid recursion feasible."""
    def feasible(v0):
        return fluid_recursion(lam, t_bar, pickup_model, v0, dt, horizon).feasible

    tp_max = pickup_model(lam * dt) if pickup_model is not None else 0.0
    lo = max(0, math.ceil(lam * t_bar) - 1)
    # one extra step of demand absorbs the rounding of return delays
    hi = math.ceil(lam * (t_bar + tp_max + dt) - _EPS)
    if not feasible(hi):
        raise BracketError(f"upper bracket V0={hi} is infeasible", low=lo, high=hi)
    if feasible(lo):
        lo = -1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi
