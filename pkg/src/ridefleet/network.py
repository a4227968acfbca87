"""Road-network environment: nodes, directed links, routing and geometry.

Node ids are external integers; internally every node has a dense index
``0..n-1`` and every link an index ``0..m-1``.  Networks are immutable once
built, so one instance can be shared by any number of simulation runs.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path as FilePath

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError

from .errors import ValidationError

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
HIGHWAY_CLASSES = ("residential", "motorway", "other")
COORDINATE_SYSTEMS = ("lonlat", "planar_m")


@dataclass(frozen=True)
class RoadNode:
    id: int
    x: float  # lon in degrees, or metres in planar mode
    y: float  # lat in degrees, or metres in planar mode


@dataclass(frozen=True)
class RoadLink:
    from_node: int
    to_node: int
    length_m: float
    free_speed_kmh: float
    highway_class: str = "other"
    effective_speed_kmh: float | None = None

    def __post_init__(self):
        if self.effective_speed_kmh is None:
            object.__setattr__(self, "effective_speed_kmh", self.free_speed_kmh)

    @property
    def travel_time_s(self) -> float:
        return self.length_m / (self.effective_speed_kmh / 3.6)


@dataclass(frozen=True)
class Path:
    nodes: tuple[int, ...]
    links: tuple[int, ...]  # link indices into RoadNetwork.links
    total_time_s: float
    total_distance_m: float

    def __len__(self):
        return len(self.links)


def haversine_m(a, b) -> float:
    """Great-circle distance in metres between two (lon, lat) points in degrees."""
    lon1, lat1 = math.radians(a[0]), math.radians(a[1])
    lon2, lat2 = math.radians(b[0]), math.radians(b[1])
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def _haversine_many(x0, y0, xs, ys):
    lon1, lat1 = np.radians(x0), np.radians(y0)
    lon2, lat2 = np.radians(xs), np.radians(ys)
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


class RoadNetwork:
    """Directed road graph with static per-link travel times."""

    def __init__(self, nodes, links, coordinate_system="planar_m",
                 area_km2_override=None, phi_override=None):
        if coordinate_system not in COORDINATE_SYSTEMS:
            raise ValidationError(f"unknown coordinate_system {coordinate_system!r}")
        self.coordinate_system = coordinate_system
        self.area_km2_override = area_km2_override
        self.phi_override = phi_override
        self.nodes: tuple[RoadNode, ...] = tuple(nodes)
        self.links: tuple[RoadLink, ...] = tuple(links)
        self.dropped_nodes = 0
        self.dropped_links = 0

        if not self.nodes:
            raise ValidationError("network has no nodes")
        self.index: dict[int, int] = {}
        for i, node in enumerate(self.nodes):
            if node.id in self.index:
                raise ValidationError(f"duplicate node id {node.id}")
            if not (math.isfinite(node.x) and math.isfinite(node.y)):
                raise ValidationError(f"node {node.id} has non-finite coordinates")
            self.index[node.id] = i
        self.xs = np.array([n.x for n in self.nodes], dtype=float)
        self.ys = np.array([n.y for n in self.nodes], dtype=float)

        n = len(self.nodes)
        self.out_adj: list[list[tuple[int, int, float]]] = [[] for _ in range(n)]
        self.in_adj: list[list[tuple[int, int, float]]] = [[] for _ in range(n)]
        times = []
        for k, link in enumerate(self.links):
            _validate_link(k, link)
            if link.from_node not in self.index or link.to_node not in self.index:
                raise ValidationError(
                    f"link {k} ({link.from_node}->{link.to_node}) references an unknown node")
            u, v = self.index[link.from_node], self.index[link.to_node]
            t = link.travel_time_s
            self.out_adj[u].append((v, k, t))
            self.in_adj[v].append((u, k, t))
            times.append(t)
        self.link_times_s = np.array(times, dtype=float)
        self.max_speed_mps = max((l.effective_speed_kmh for l in self.links), default=0.0) / 3.6

    def __repr__(self):
        return f"RoadNetwork({len(self.nodes)} nodes, {len(self.links)} links, {self.coordinate_system})"

    @property
    def planar(self) -> bool:
        return self.coordinate_system == "planar_m"

    def node_index(self, node_id: int) -> int:
        try:
            return self.index[node_id]
        except KeyError:
            raise ValidationError(f"node {node_id} is not in the network") from None

    def straight_line_m(self, i: int, j: int) -> float:
        """Straight-line distance between node indices (haversine or Euclidean)."""
        if self.planar:
            return math.hypot(self.xs[i] - self.xs[j], self.ys[i] - self.ys[j])
        return haversine_m((self.xs[i], self.ys[i]), (self.xs[j], self.ys[j]))

    def straight_line_many(self, i: int, js) -> np.ndarray:
        js = np.asarray(js, dtype=int)
        if self.planar:
            return np.hypot(self.xs[js] - self.xs[i], self.ys[js] - self.ys[i])
        return _haversine_many(self.xs[i], self.ys[i], self.xs[js], self.ys[js])

    @cached_property
    def area_km2(self) -> float:
        if self.area_km2_override is not None:
            return float(self.area_km2_override)
        return network_area_km2(self)

    @cached_property
    def circuity_phi(self) -> float:
        if self.phi_override is not None:
            return float(self.phi_override)
        return estimate_circuity(self, n_samples=1000, rng_seed=0)

    @cached_property
    def mean_speed_kmh(self) -> float:
        # length-weighted harmonic mean: total length over total travel time
        total_len = sum(l.length_m for l in self.links)
        return total_len / float(self.link_times_s.sum()) * 3.6

    # -- routing -----------------------------------------------------------

    def _heuristic_factory(self, target: int):
        inv_v = 1.0 / self.max_speed_mps
        xs, ys = self.xs, self.ys
        tx, ty = xs[target], ys[target]
        if self.planar:
            hypot = math.hypot
            return lambda i: hypot(xs[i] - tx, ys[i] - ty) * inv_v
        return lambda i: haversine_m((xs[i], ys[i]), (tx, ty)) * inv_v

    def astar_idx(self, source: int, target: int) -> tuple[list[int], list[int], float]:
        """A* on node indices; returns (node indices, link indices, time in s)."""
        if source == target:
            return [source], [], 0.0
        h = self._heuristic_factory(target)
        out_adj = self.out_adj
        g = {source: 0.0}
        parent: dict[int, tuple[int, int]] = {}
        closed = set()
        heap = [(h(source), 0.0, source)]
        push, pop = heapq.heappush, heapq.heappop
        while heap:
            _, gu, u = pop(heap)
            if u in closed:
                continue
            if u == target:
                break
            closed.add(u)
            for v, k, t in out_adj[u]:
                if v in closed:
                    continue
                gv = gu + t
                if gv < g.get(v, math.inf):
                    g[v] = gv
                    parent[v] = (u, k)
                    push(heap, (gv + h(v), gv, v))
        else:
            raise RuntimeError(f"node index {target} unreachable from {source}")
        nodes, links = [target], []
        v = target
        while v != source:
            u, k = parent[v]
            links.append(k)
            nodes.append(u)
            v = u
        nodes.reverse()
        links.reverse()
        return nodes, links, g[target]

    def times_to(self, target: int, sources) -> dict[int, float]:
        """Network travel time from each source node index to ``target``.

        One reverse Dijkstra that stops once every source is settled.
        """
        remaining = set(sources)
        out: dict[int, float] = {}
        if target in remaining:
            out[target] = 0.0
            remaining.discard(target)
        if not remaining:
            return out
        in_adj = self.in_adj
        dist = {target: 0.0}
        done = set()
        heap = [(0.0, target)]
        push, pop = heapq.heappush, heapq.heappop
        while heap and remaining:
            du, u = pop(heap)
            if u in done:
                continue
            done.add(u)
            if u in remaining:
                out[u] = du
                remaining.discard(u)
            for w, _, t in in_adj[u]:
                dw = du + t
                if dw < dist.get(w, math.inf):
                    dist[w] = dw
                    push(heap, (dw, w))
        if remaining:
            raise RuntimeError(f"{len(remaining)} sources cannot reach node index {target}")
        return out

    def path_from_indices(self, nodes: list[int], links: list[int]) -> Path:
        total_t = 0.0
        total_d = 0.0
        for k in links:
            total_t += self.link_times_s[k]
            total_d += self.links[k].length_m
        return Path(tuple(self.nodes[i].id for i in nodes), tuple(links), total_t, total_d)


def _validate_link(k, link: RoadLink):
    if not (link.length_m > 0 and math.isfinite(link.length_m)):
        raise ValidationError(f"link {k} ({link.from_node}->{link.to_node}) has invalid length {link.length_m}")
    if not (link.free_speed_kmh > 0 and math.isfinite(link.free_speed_kmh)):
        raise ValidationError(f"link {k} ({link.from_node}->{link.to_node}) has invalid speed {link.free_speed_kmh}")
    if not (0 < link.effective_speed_kmh <= link.free_speed_kmh):
        raise ValidationError(f"link {k} effective speed must lie in (0, free speed]")
    if link.highway_class not in HIGHWAY_CLASSES:
        raise ValidationError(f"link {k} has unknown class {link.highway_class!r}")


def largest_scc(network: RoadNetwork) -> RoadNetwork:
    """Restrict to the largest strongly connected component.

    The returned network records how many nodes and links were dropped.
    """
    n = len(network.nodes)
    rows = [network.index[l.from_node] for l in network.links]
    cols = [network.index[l.to_node] for l in network.links]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=True, connection="strong")
    sizes = np.bincount(labels)
    # lowest label among the largest keeps the choice deterministic
    keep_label = int(np.argmax(sizes))
    keep = {network.nodes[i].id for i in range(n) if labels[i] == keep_label}
    if len(keep) < 2:
        raise ValidationError("network is empty after restricting to its largest strongly connected component")
    nodes = [nd for nd in network.nodes if nd.id in keep]
    links = [l for l in network.links if l.from_node in keep and l.to_node in keep]
    out = RoadNetwork(nodes, links, network.coordinate_system,
                      network.area_km2_override, network.phi_override)
    out.dropped_nodes = network.dropped_nodes + n - len(nodes)
    out.dropped_links = network.dropped_links + len(network.links) - len(links)
    return out


def load_network(file_path) -> RoadNetwork:
    """Read a network JSON file and restrict it to its largest SCC."""
    try:
        doc = json.loads(FilePath(file_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read network file {file_path}: {exc}") from exc
    try:
        nodes = [RoadNode(int(n["id"]), float(n["x"]), float(n["y"])) for n in doc["nodes"]]
        links = [RoadLink(int(l["from"]), int(l["to"]), float(l["length_m"]),
                          float(l["speed_kmh"]), l.get("class", "other"))
                 for l in doc["links"]]
        coord = doc.get("coordinate_system", "lonlat")
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed network file {file_path}: {exc!r}") from exc
    raw = RoadNetwork(nodes, links, coord, doc.get("area_km2_override"), doc.get("phi_override"))
    net = largest_scc(raw)
    if net.dropped_nodes or net.dropped_links:
        log.info("dropped %d nodes and %d links outside the largest SCC",
                 net.dropped_nodes, net.dropped_links)
    return net


def save_network(network: RoadNetwork, file_path) -> None:
    doc = {
        "coordinate_system": network.coordinate_system,
        "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in network.nodes],
        "links": [{"from": l.from_node, "to": l.to_node, "length_m": l.length_m,
                   "speed_kmh": l.effective_speed_kmh, "class": l.highway_class}
                  for l in network.links],
    }
    if network.area_km2_override is not None:
        doc["area_km2_override"] = network.area_km2_override
    if network.phi_override is not None:
        doc["phi_override"] = network.phi_override
    FilePath(file_path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def generate_grid(rows: int, cols: int, block_m: float, speed_kmh: float,
                  highway_class: str = "residential") -> RoadNetwork:
    """Bidirectional Manhattan grid in planar metres; node id = r * cols + c."""
    if rows < 2 or cols < 2:
        raise ValidationError("grid needs at least 2 rows and 2 columns")
    if not (block_m > 0 and speed_kmh > 0):
        raise ValidationError("block length and speed must be positive")
    nodes = [RoadNode(r * cols + c, c * block_m, r * block_m)
             for r in range(rows) for c in range(cols)]
    links = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr < rows and cc < cols:
                    v = rr * cols + cc
                    links.append(RoadLink(u, v, block_m, speed_kmh, highway_class))
                    links.append(RoadLink(v, u, block_m, speed_kmh, highway_class))
    return RoadNetwork(nodes, links, "planar_m")


def apply_speed_reduction(network: RoadNetwork, residential_motorway_factor: float = 0.8,
                          other_factor: float = 0.6) -> RoadNetwork:
    """Recompute effective speeds from free-flow speeds by highway class."""
    for f in (residential_motorway_factor, other_factor):
        if not 0 < f <= 1:
            raise ValidationError(f"speed factor {f} outside (0, 1]")
    links = []
    for l in network.links:
        f = residential_motorway_factor if l.highway_class in ("residential", "motorway") else other_factor
        links.append(RoadLink(l.from_node, l.to_node, l.length_m, l.free_speed_kmh,
                              l.highway_class, l.free_speed_kmh * f))
    out = RoadNetwork(network.nodes, links, network.coordinate_system,
                      network.area_km2_override, network.phi_override)
    out.dropped_nodes, out.dropped_links = network.dropped_nodes, network.dropped_links
    return out


def shortest_path(network: RoadNetwork, origin: int, destination: int) -> Path:
    """Time-optimal path between two node ids (A*, straight line over max speed)."""
    o, d = network.node_index(origin), network.node_index(destination)
    nodes, links, _ = network.astar_idx(o, d)
    return network.path_from_indices(nodes, links)


def _path_distance_m(network: RoadNetwork, o: int, d: int) -> float:
    _, links, _ = network.astar_idx(o, d)
    return sum(network.links[k].length_m for k in links)


def estimate_circuity(network: RoadNetwork, n_samples: int = 1000, rng_seed: int = 0,
                      pairs=None) -> float:
    """Mean ratio of routed path length to straight-line distance.

    Uniform distinct node pairs by default.  Passing ``pairs`` (node-id
    tuples, e.g. demand ODs) gives the demand-weighted variant instead.
    """
    if pairs is not None:
        idx_pairs = [(network.node_index(o), network.node_index(d)) for o, d in pairs]
        idx_pairs = [(o, d) for o, d in idx_pairs if network.straight_line_m(o, d) > 0]
        if not idx_pairs:
            raise ValidationError("no non-degenerate pairs given")
    else:
        if n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        n = len(network.nodes)
        if n < 2:
            raise ValidationError("need at least two nodes")
        rng = np.random.default_rng(rng_seed)
        idx_pairs = []
        while len(idx_pairs) < n_samples:
            o = int(rng.integers(n))
            d = int(rng.integers(n - 1))
            d += d >= o
            if network.straight_line_m(o, d) > 0:
                idx_pairs.append((o, d))
    ratios = [_path_distance_m(network, o, d) / network.straight_line_m(o, d) for o, d in idx_pairs]
    return float(np.mean(ratios))


def _planar_coords(network: RoadNetwork) -> np.ndarray:
    if network.planar:
        return np.column_stack([network.xs, network.ys])
    # local equirectangular projection around the centroid
    lat0 = math.radians(float(network.ys.mean()))
    lon0 = float(network.xs.mean())
    x = np.radians(network.xs - lon0) * EARTH_RADIUS_M * math.cos(lat0)
    y = np.radians(network.ys) * EARTH_RADIUS_M
    return np.column_stack([x, y])


def network_area_km2(network: RoadNetwork) -> float:
    """Override if declared, else the convex-hull area of the node coordinates."""
    if network.area_km2_override is not None:
        return float(network.area_km2_override)
    pts = _planar_coords(network)
    if len(pts) < 3:
        raise ValidationError("area needs at least 3 non-collinear nodes")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise ValidationError("node set is collinear or degenerate") from exc
    return hull.volume / 1e6
