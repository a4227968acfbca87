"""Traveller, vehicle and operator agents with their state machines."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .demand import TripRequest
from .errors import ValidationError

_EPS = 1e-9
TIE_TOLERANCE_S = 1e-9


class TravellerState(enum.Enum):
    WAITING_FOR_ASSIGNMENT = "WaitingForAssignment"
    WAITING_FOR_PICKUP = "WaitingForPickup"
    IN_TRIP = "InTrip"
    SERVED = "Served"


class VehicleState(enum.Enum):
    IDLE = "Idle"
    TO_ORIGIN = "TravellingToOrigin"
    LOADING = "Loading"
    TO_DESTINATION = "TravellingToDestination"
    UNLOADING = "Unloading"


class Event(NamedTuple):
    kind: str  # "pickup" or "dropoff"
    traveller_id: int
    vehicle_id: int
    time: float


@dataclass(eq=False)
class Traveller:
    request: TripRequest
    state: TravellerState = TravellerState.WAITING_FOR_ASSIGNMENT
    vehicle_id: int | None = None
    t_assigned: float | None = None
    t_pickup: float | None = None
    t_dropoff: float | None = None

    @property
    def id(self) -> int:
        return self.request.id

    @property
    def assignment_wait(self):
        return None if self.t_assigned is None else self.t_assigned - self.request.request_time

    @property
    def pickup_wait(self):
        return None if self.t_pickup is None else self.t_pickup - self.t_assigned

    @property
    def trip_time(self):
        return None if self.t_dropoff is None else self.t_dropoff - self.t_pickup


@dataclass(eq=False)
class Vehicle:
    id: int
    node: int  # node index of the current or last visited node
    state: VehicleState = VehicleState.IDLE
    dwell_load_s: float = 0.0
    dwell_unload_s: float = 0.0
    assigned_traveller: int | None = None
    trip: tuple[int, int] | None = None  # (origin, destination) node indices
    route: list[int] | None = None  # remaining links are route[route_pos:]
    route_pos: int = 0
    offset_m: float = 0.0
    dwell_left: float = 0.0
    odometer_m: float = 0.0
    trips_served: int = 0

    def position(self, network):
        """(link index, offset in metres) while on a link, else the node id."""
        if self.route is not None and self.route_pos < len(self.route) and self.offset_m > 0:
            return (self.route[self.route_pos], self.offset_m)
        return network.nodes[self.node].id

    def _start_route(self, network, target: int, state: VehicleState):
        _, links, _ = network.astar_idx(self.node, target)
        self.route, self.route_pos, self.offset_m = links, 0, 0.0
        self.state = state


class Operator:
    """Owns the single FIFO request queue."""

    def __init__(self, id: int = 0, fleet=(), dt: float = 1.0):
        self.id = id
        self.fleet = list(fleet)  # vehicle ids
        self.dt = dt
        self.fifo_queue: deque[int] = deque()
        self.waiting: dict[int, Traveller] = {}
        self._keys: dict[int, tuple[int, int]] = {}

    def __len__(self):
        return len(self.fifo_queue)

    def queue_key(self, traveller: Traveller) -> tuple[int, int]:
        # arrival step, then id
        step = math.ceil(traveller.request.request_time / self.dt - _EPS)
        return (step, traveller.id)


def enqueue_request(operator: Operator, traveller: Traveller) -> None:
    if traveller.state is not TravellerState.WAITING_FOR_ASSIGNMENT:
        raise ValidationError(f"traveller {traveller.id} is {traveller.state.value}, not waiting for assignment")
    if traveller.id in operator.waiting:
        raise ValidationError(f"traveller {traveller.id} is already queued")
    key = operator.queue_key(traveller)
    q = operator.fifo_queue
    operator.waiting[traveller.id] = traveller
    operator._keys[traveller.id] = key
    # arrivals come in time order, so at most a few same-step entries move
    i = len(q)
    while i > 0 and operator._keys[q[i - 1]] > key:
        i -= 1
    if i == len(q):
        q.append(traveller.id)
    else:
        q.insert(i, traveller.id)


def _closest(network, origin: int, idle: list[Vehicle], idle_nodes: np.ndarray, k: int) -> int:
    """Index into ``idle`` of the vehicle with least network time to ``origin``."""
    if k and len(idle) > k:
        d = network.straight_line_many(origin, idle_nodes)
        cand = np.argpartition(d, k - 1)[:k].tolist()
    else:
        cand = range(len(idle))
    times = network.times_to(origin, {int(idle_nodes[i]) for i in cand})
    best_t = min(times[int(idle_nodes[i])] for i in cand)
    return min((i for i in cand if times[int(idle_nodes[i])] <= best_t + TIE_TOLERANCE_S),
               key=lambda i: idle[i].id)


def fifo_assign(operator: Operator, network, fleet, now: float, prefilter_k: int = 16):
    """Assign queued travellers, head first, to their closest idle vehicle.

    ``prefilter_k`` keeps only the k straight-line nearest idle vehicles as
    candidates (0 disables the filter).  Returns (traveller id, vehicle id)
    pairs in assignment order.
    """
    q = operator.fifo_queue
    if not q:
        return []
    idle = sorted((v for v in fleet if v.state is VehicleState.IDLE), key=lambda v: v.id)
    if not idle:
        return []
    idle_nodes = np.array([v.node for v in idle], dtype=int)
    pairs = []
    while q and idle:
        tr = operator.waiting[q[0]]
        origin = network.node_index(tr.request.origin)
        i = _closest(network, origin, idle, idle_nodes, prefilter_k)
        veh = idle.pop(i)
        idle_nodes = np.delete(idle_nodes, i)
        q.popleft()
        del operator.waiting[tr.id]
        del operator._keys[tr.id]

        tr.state = TravellerState.WAITING_FOR_PICKUP
        tr.t_assigned = now
        tr.vehicle_id = veh.id
        veh.assigned_traveller = tr.id
        veh.trip = (origin, network.node_index(tr.request.destination))
        veh._start_route(network, origin, VehicleState.TO_ORIGIN)
        pairs.append((tr.id, veh.id))
    return pairs


def vehicle_step(vehicle: Vehicle, network, dt_s: float, now: float = 0.0) -> list[Event]:
    """Advance one vehicle by ``dt_s`` seconds of simulated time.

    Remaining time carries across state changes inside the step, so zero
    dwell means a pickup at the instant of arrival.  Event times are exact
    instants within ``[now, now + dt_s]``.
    """
    events: list[Event] = []
    budget = dt_s
    links = network.links
    times = network.link_times_s
    while True:
        state = vehicle.state
        if state is VehicleState.IDLE:
            return events
        if state is VehicleState.TO_ORIGIN or state is VehicleState.TO_DESTINATION:
            route = vehicle.route
            if route is None:
                raise RuntimeError(f"vehicle {vehicle.id} is {state.value} without a route")
            while vehicle.route_pos < len(route) and budget > _EPS:
                k = route[vehicle.route_pos]
                link = links[k]
                left_m = link.length_m - vehicle.offset_m
                left_t = times[k] * left_m / link.length_m
                if left_t <= budget + _EPS:
                    budget -= left_t
                    vehicle.odometer_m += left_m
                    vehicle.offset_m = 0.0
                    vehicle.route_pos += 1
                    vehicle.node = network.index[link.to_node]
                else:
                    moved = budget / times[k] * link.length_m
                    vehicle.offset_m += moved
                    vehicle.odometer_m += moved
                    budget = 0.0
            if vehicle.route_pos < len(route):
                return events
            vehicle.route = None
            if state is VehicleState.TO_ORIGIN:
                vehicle.state, vehicle.dwell_left = VehicleState.LOADING, vehicle.dwell_load_s
            else:
                vehicle.state, vehicle.dwell_left = VehicleState.UNLOADING, vehicle.dwell_unload_s
            continue
        # loading or unloading
        if vehicle.dwell_left > budget + _EPS:
            vehicle.dwell_left -= budget
            return events
        budget = max(0.0, budget - vehicle.dwell_left)
        vehicle.dwell_left = 0.0
        t = now + dt_s - budget
        if state is VehicleState.LOADING:
            events.append(Event("pickup", vehicle.assigned_traveller, vehicle.id, t))
            vehicle._start_route(network, vehicle.trip[1], VehicleState.TO_DESTINATION)
        else:
            events.append(Event("dropoff", vehicle.assigned_traveller, vehicle.id, t))
            vehicle.state = VehicleState.IDLE
            vehicle.assigned_traveller = None
            vehicle.trip = None
            vehicle.trips_served += 1
            return events


def traveller_step(traveller: Traveller, events) -> None:
    for ev in events:
        if ev.traveller_id != traveller.id:
            continue
        if ev.kind == "pickup" and traveller.state is TravellerState.WAITING_FOR_PICKUP:
            traveller.state = TravellerState.IN_TRIP
            traveller.t_pickup = ev.time
        elif ev.kind == "dropoff" and traveller.state is TravellerState.IN_TRIP:
            traveller.state = TravellerState.SERVED
            traveller.t_dropoff = ev.time
        else:
            raise RuntimeError(f"traveller {traveller.id}: event {ev.kind!r} in state {traveller.state.value}")
