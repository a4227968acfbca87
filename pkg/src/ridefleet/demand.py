"""Synthetic demand: Poisson arrivals, OD sampling, IPF and request files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, ValidationError

REQUEST_HEADER = ["id", "request_time_s", "origin_node", "destination_node", "party_size"]


@dataclass(frozen=True)
class TripRequest:
    id: int
    request_time: float  # seconds from simulation start
    origin: int
    destination: int
    party_size: int = 1

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValidationError(f"request {self.id}: origin equals destination")
        if not self.request_time >= 0:
            raise ValidationError(f"request {self.id}: negative request time")
        if self.party_size < 1:
            raise ValidationError(f"request {self.id}: party_size must be >= 1")


@dataclass
class ODMatrix:
    zones: list
    cells: np.ndarray
    zone_nodes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        k = len(self.zones)
        if self.cells.shape != (k, k):
            raise ValidationError(f"OD cells must be {k}x{k}, got {self.cells.shape}")
        if (self.cells < 0).any():
            raise ValidationError("OD cells must be non-negative")
        for z in self.zones:
            if not self.zone_nodes.get(z):
                raise ValidationError(f"zone {z!r} maps to no network nodes")

    @classmethod
    def from_json(cls, file_path):
        """Load ``{"zones", "cells", "zone_nodes"}``; optional ``row_marginals`` and
        ``col_marginals`` fit the cells by IPF first."""
        doc = json.loads(Path(file_path).read_text(encoding="utf-8"))
        try:
            zones = list(doc["zones"])
            cells = np.asarray(doc["cells"], dtype=float)
            zone_nodes = {z: [int(n) for n in doc["zone_nodes"][str(z)]] for z in zones}
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed OD matrix file {file_path}: {exc!r}") from exc
        if "row_marginals" in doc or "col_marginals" in doc:
            cells = ipf_fit(cells, doc["row_marginals"], doc["col_marginals"])
        return cls(zones, cells, zone_nodes)


def sample_arrival_times(lambda_per_h: float, horizon_h: float, rng_seed) -> list[float]:
    """Poisson arrival instants in seconds over ``[0, horizon)``."""
    if not (lambda_per_h > 0 and horizon_h > 0):
        raise ValidationError("arrival rate and horizon must be positive")
    rng = np.random.default_rng(rng_seed)
    horizon_s = horizon_h * 3600.0
    mean_gap = 3600.0 / lambda_per_h
    times = []
    t = 0.0
    chunk = max(16, int(lambda_per_h * horizon_h * 1.1) + 16)
    while True:
        for gap in rng.exponential(mean_gap, size=chunk):
            t += gap
            if t >= horizon_s:
                return times
            times.append(float(t))


def _require_two_nodes(nodes):
    if len(nodes) < 2:
        raise ValidationError("need at least two nodes to sample distinct OD pairs")


def sample_od_uniform(network, rng_seed, n: int) -> list[tuple[int, int]]:
    """Uniform over ordered pairs of distinct nodes."""
    ids = [nd.id for nd in network.nodes]
    _require_two_nodes(ids)
    rng = np.random.default_rng(rng_seed)
    k = len(ids)
    o = rng.integers(k, size=n)
    d = rng.integers(k - 1, size=n)
    d = d + (d >= o)
    return [(ids[a], ids[b]) for a, b in zip(o.tolist(), d.tolist())]


def ipf_fit(seed_matrix, row_marginals, col_marginals, tolerance: float = 1e-8,
            max_iterations: int = 10_000) -> np.ndarray:
    """Scale ``seed_matrix`` so its row and column sums match the marginals.

    Alternates row and column scaling until the max-norm marginal residual
    is at most ``tolerance``.  Zero cells of the seed stay zero.
    """
    x = np.array(seed_matrix, dtype=float)
    rows = np.asarray(row_marginals, dtype=float)
    cols = np.asarray(col_marginals, dtype=float)
    if x.ndim != 2 or x.shape != (len(rows), len(cols)):
        raise ValidationError(f"seed shape {x.shape} does not match marginals ({len(rows)}, {len(cols)})")
    if (x < 0).any() or (rows < 0).any() or (cols < 0).any():
        raise ValidationError("seed and marginals must be non-negative")
    total_r, total_c = rows.sum(), cols.sum()
    if abs(total_r - total_c) > 1e-9 * max(abs(total_r), abs(total_c), 1.0):
        raise ValidationError(f"marginal totals differ: rows {total_r} vs cols {total_c}")
    rs, cs = x.sum(axis=1), x.sum(axis=0)
    bad_r = np.flatnonzero((rs == 0) & (rows > 0))
    bad_c = np.flatnonzero((cs == 0) & (cols > 0))
    if bad_r.size or bad_c.size:
        raise ValidationError(f"infeasible zero structure: rows {bad_r.tolist()}, cols {bad_c.tolist()}")

    residual = np.inf
    for it in range(1, max_iterations + 1):
        rs = x.sum(axis=1)
        x *= np.divide(rows, rs, out=np.zeros_like(rows), where=rs > 0)[:, None]
        cs = x.sum(axis=0)
        x *= np.divide(cols, cs, out=np.zeros_like(cols), where=cs > 0)[None, :]
        residual = max(np.abs(x.sum(axis=1) - rows).max(), np.abs(x.sum(axis=0) - cols).max())
        if residual <= tolerance:
            return x
    raise ConvergenceError(f"IPF did not converge in {max_iterations} iterations "
                           f"(residual {residual:.3e})", residual=residual, iterations=max_iterations)


def sample_od_zonal(od_matrix: ODMatrix, rng_seed, n: int,
                    max_resample: int = 1000) -> list[tuple[int, int]]:
    """Zone pair proportional to cell weight, then a uniform node in each zone."""
    w = od_matrix.cells.ravel()
    total = w.sum()
    if not total > 0:
        raise ValidationError("OD matrix has no positive cells")
    rng = np.random.default_rng(rng_seed)
    k = len(od_matrix.zones)
    picks = rng.choice(w.size, size=n, p=w / total)
    out = []
    for cell in picks.tolist():
        zo, zd = od_matrix.zones[cell // k], od_matrix.zones[cell % k]
        on, dn = od_matrix.zone_nodes[zo], od_matrix.zone_nodes[zd]
        for _ in range(max_resample):
            o = on[int(rng.integers(len(on)))]
            d = dn[int(rng.integers(len(dn)))]
            if o != d:
                out.append((o, d))
                break
        else:
            raise ValidationError(f"could not draw distinct nodes for zone pair ({zo!r}, {zd!r})")
    return out


def make_requests(times, pairs) -> list[TripRequest]:
    return [TripRequest(i, t, o, d) for i, (t, (o, d)) in enumerate(zip(times, pairs))]


def write_requests(file_path, requests) -> None:
    with open(file_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUEST_HEADER)
        for r in requests:
            w.writerow([r.id, repr(float(r.request_time)), r.origin, r.destination, r.party_size])


def load_requests(file_path) -> list[TripRequest]:
    out: list[TripRequest] = []
    seen = set()
    with open(file_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REQUEST_HEADER:
            raise ValidationError(f"{file_path}: expected header {','.join(REQUEST_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rid, t, o, d, p = int(row[0]), float(row[1]), int(row[2]), int(row[3]), int(row[4])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{file_path}:{line_no}: malformed row {row!r}") from exc
            if o == d:
                raise ValidationError(f"{file_path}:{line_no}: origin equals destination")
            if rid in seen:
                raise ValidationError(f"{file_path}:{line_no}: duplicate id {rid}")
            if out and t < out[-1].request_time:
                raise ValidationError(f"{file_path}:{line_no}: rows not sorted by request_time")
            seen.add(rid)
            try:
                out.append(TripRequest(rid, t, o, d, p))
            except ValidationError as exc:
                raise ValidationError(f"{file_path}:{line_no}: {exc}") from exc
    return out
