import json
import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from ridefleet.errors import ValidationError
from ridefleet.network import (
    RoadLink,
    RoadNetwork,
    RoadNode,
    apply_speed_reduction,
    estimate_circuity,
    generate_grid,
    haversine_m,
    load_network,
    network_area_km2,
    save_network,
    shortest_path,
)


def dijkstra_times(net, source_id):
    """Reference single-source times via scipy (independent of the A* code)."""
    n = len(net.nodes)
    rows = [net.index[l.from_node] for l in net.links]
    cols = [net.index[l.to_node] for l in net.links]
    g = csr_matrix((net.link_times_s, (rows, cols)), shape=(n, n))
    return dijkstra(g, directed=True, indices=net.index[source_id])


def write_net(tmp_path, nodes, links, **extra):
    doc = {"coordinate_system": "planar_m", "nodes": nodes, "links": links, **extra}
    p = tmp_path / "net.json"
    p.write_text(json.dumps(doc))
    return p


SQUARE_NODES = [{"id": i, "x": x, "y": y} for i, (x, y) in enumerate([(0, 0), (100, 0), (100, 100), (0, 100)])]


def square_links(length=100.0):
    out = []
    for a, b in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        out.append({"from": a, "to": b, "length_m": length, "speed_kmh": 36, "class": "residential"})
        out.append({"from": b, "to": a, "length_m": length, "speed_kmh": 36, "class": "other"})
    return out


def test_load_square(tmp_path):
    net = load_network(write_net(tmp_path, SQUARE_NODES, square_links()))
    assert len(net.nodes) == 4 and len(net.links) == 8
    assert net.dropped_nodes == 0


def test_load_rejects_negative_length(tmp_path):
    links = square_links()
    links[3]["length_m"] = -5
    with pytest.raises(ValidationError, match="link 3"):
        load_network(write_net(tmp_path, SQUARE_NODES, links))


def test_load_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValidationError):
        load_network(p)
    with pytest.raises(ValidationError):
        load_network(write_net(tmp_path, [{"id": 0}], []))


def test_load_drops_satellite(tmp_path):
    nodes = SQUARE_NODES + [{"id": 9, "x": 500, "y": 500}]
    links = square_links() + [{"from": 9, "to": 0, "length_m": 600, "speed_kmh": 36, "class": "other"}]
    net = load_network(write_net(tmp_path, nodes, links))
    # oracle: networkx SCCs
    g = nx.DiGraph([(l["from"], l["to"]) for l in links])
    g.add_nodes_from(n["id"] for n in nodes)
    biggest = max(nx.strongly_connected_components(g), key=len)
    assert {n.id for n in net.nodes} == biggest
    assert net.dropped_nodes == len(nodes) - len(biggest) == 1
    assert net.dropped_links == 1


def test_save_load_roundtrip(tmp_path):
    net = generate_grid(3, 4, 150, 30)
    save_network(net, tmp_path / "g.json")
    back = load_network(tmp_path / "g.json")
    assert back.nodes == net.nodes
    assert [l.length_m for l in back.links] == [l.length_m for l in net.links]


@pytest.mark.parametrize("rows,cols,nodes,links", [(2, 2, 4, 8), (3, 3, 9, 24), (4, 7, 28, 2 * (4 * 6 + 3 * 7))])
def test_grid_counts(rows, cols, nodes, links):
    net = generate_grid(rows, cols, 100, 30)
    assert len(net.nodes) == nodes and len(net.links) == links
    assert all(l.length_m == 100 for l in net.links)


def test_grid_interior_degree():
    net = generate_grid(5, 5, 100, 30)
    interior = net.index[2 * 5 + 2]
    assert len(net.out_adj[interior]) == 4 and len(net.in_adj[interior]) == 4


@pytest.mark.parametrize("args", [(1, 3, 100, 30), (3, 3, 0, 30), (3, 3, 100, -1)])
def test_grid_rejects_bad_parameters(args):
    with pytest.raises(ValidationError):
        generate_grid(*args)


def test_speed_reduction():
    nodes = [RoadNode(0, 0, 0), RoadNode(1, 100, 0)]
    net = RoadNetwork(nodes, [RoadLink(0, 1, 100, 50, "residential"), RoadLink(1, 0, 100, 30, "other"),
                              RoadLink(0, 1, 100, 80, "motorway")])
    red = apply_speed_reduction(net, 0.8, 0.6)
    assert [l.effective_speed_kmh for l in red.links] == pytest.approx([40, 18, 64])
    assert [l.free_speed_kmh for l in red.links] == [50, 30, 80]
    # recomputed from free speeds, not compounded
    again = apply_speed_reduction(red, 0.8, 0.6)
    assert [l.effective_speed_kmh for l in again.links] == pytest.approx([40, 18, 64])
    ident = apply_speed_reduction(net, 1.0, 1.0)
    assert all(l.effective_speed_kmh == l.free_speed_kmh for l in ident.links)
    assert all(r.travel_time_s >= l.travel_time_s for r, l in zip(red.links, net.links))
    with pytest.raises(ValidationError):
        apply_speed_reduction(net, 0.0, 0.5)
    with pytest.raises(ValidationError):
        apply_speed_reduction(net, 0.5, 1.5)


def test_shortest_path_trivial():
    net = RoadNetwork([RoadNode(0, 0, 0), RoadNode(1, 100, 0)],
                      [RoadLink(0, 1, 100, 36), RoadLink(1, 0, 100, 36)])
    p = shortest_path(net, 0, 0)
    assert p.links == () and p.total_time_s == 0
    p = shortest_path(net, 0, 1)
    assert p.total_time_s == pytest.approx(10.0)
    assert p.total_distance_m == 100
    assert p.nodes == (0, 1)


def test_shortest_path_prefers_faster_route():
    # direct slow link vs two-link fast detour
    nodes = [RoadNode(0, 0, 0), RoadNode(1, 100, 0), RoadNode(2, 50, 10)]
    links = [RoadLink(0, 1, 100, 10), RoadLink(0, 2, 60, 100), RoadLink(2, 1, 60, 100),
             RoadLink(1, 0, 100, 10)]
    p = shortest_path(RoadNetwork(nodes, links), 0, 1)
    assert p.nodes == (0, 2, 1)


def test_astar_matches_dijkstra_sampled():
    net = generate_grid(20, 20, 100, 30)
    rng = np.random.default_rng(7)
    ids = [n.id for n in net.nodes]
    for _ in range(100):
        o, d = rng.choice(ids, 2, replace=False)
        p = shortest_path(net, int(o), int(d))
        assert p.total_time_s == dijkstra_times(net, int(o))[net.index[int(d)]]


def test_astar_on_irregular_speeds_matches_dijkstra():
    rng = np.random.default_rng(3)
    base = generate_grid(8, 8, 120, 30)
    links = [RoadLink(l.from_node, l.to_node, l.length_m * rng.uniform(1, 1.5), rng.uniform(10, 60))
             for l in base.links]
    net = RoadNetwork(base.nodes, links)
    for o in range(0, 64, 7):
        ref = dijkstra_times(net, o)
        for d in range(64):
            p = shortest_path(net, o, d)
            assert p.total_time_s == pytest.approx(ref[net.index[d]], rel=1e-12)


def test_path_sums_and_continuity():
    net = generate_grid(6, 6, 90, 25)
    p = shortest_path(net, 0, 35)
    for a, b in zip(p.links, p.links[1:]):
        assert net.links[a].to_node == net.links[b].from_node
    assert math.isclose(p.total_time_s, sum(net.links[k].travel_time_s for k in p.links), rel_tol=1e-9)
    assert math.isclose(p.total_distance_m, sum(net.links[k].length_m for k in p.links), rel_tol=1e-9)


def test_haversine():
    assert haversine_m((1.5, 2.5), (1.5, 2.5)) == 0
    # R * dlambda at the equator
    assert haversine_m((0, 0), (1, 0)) == pytest.approx(6_371_000 * math.pi / 180, rel=1e-12)
    assert haversine_m((0, 0), (1, 0)) == pytest.approx(111_195, abs=1)


@given(st.floats(-180, 180), st.floats(-89, 89), st.floats(-180, 180), st.floats(-89, 89))
def test_haversine_symmetric(a, b, c, d):
    assert haversine_m((a, b), (c, d)) == pytest.approx(haversine_m((c, d), (a, b)), abs=1e-6)


def test_circuity_chain_is_one():
    nodes = [RoadNode(i, i * 50.0, 0.0) for i in range(10)]
    links = [RoadLink(i, i + 1, 50, 30) for i in range(9)] + [RoadLink(i + 1, i, 50, 30) for i in range(9)]
    assert estimate_circuity(RoadNetwork(nodes, links), 200, 1) == pytest.approx(1.0, abs=1e-12)


def test_circuity_grid_matches_monte_carlo():
    net = generate_grid(30, 30, 100, 30)
    phi = estimate_circuity(net, 3000, 11)
    # oracle: Manhattan over Euclidean for 1e5 uniform distinct lattice pairs
    rng = np.random.default_rng(0)
    a = rng.integers(0, 30, size=(100_000, 2))
    b = rng.integers(0, 30, size=(100_000, 2))
    keep = (a != b).any(axis=1)
    dx, dy = np.abs(a - b)[keep].T
    ref = np.mean((dx + dy) / np.hypot(dx, dy))
    assert phi == pytest.approx(ref, rel=0.02)
    assert phi >= 1 - 1e-12


def test_circuity_deterministic_and_demand_weighted():
    net = generate_grid(6, 6, 100, 30)
    assert estimate_circuity(net, 50, 5) == estimate_circuity(net, 50, 5)
    # straight pairs along one row have ratio 1
    assert estimate_circuity(net, pairs=[(0, 5), (6, 8)]) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        estimate_circuity(net, 0)


def test_area():
    assert network_area_km2(generate_grid(2, 2, 100, 30)) == pytest.approx(0.01)
    assert network_area_km2(generate_grid(40, 40, 205, 25)) == pytest.approx((39 * 205) ** 2 / 1e6)
    assert network_area_km2(generate_grid(40, 40, 205, 25)) == pytest.approx(63.9, abs=0.05)
    net = RoadNetwork(generate_grid(3, 3, 100, 30).nodes, [], area_km2_override=12.5)
    assert network_area_km2(net) == 12.5 and net.area_km2 == 12.5


def test_area_collinear():
    nodes = [RoadNode(i, i * 10.0, 0.0) for i in range(5)]
    with pytest.raises(ValidationError):
        network_area_km2(RoadNetwork(nodes, []))


def test_area_lonlat_projection():
    # 0.01 deg square at the equator is about 1.112 km per side
    nodes = [RoadNode(0, 0, 0), RoadNode(1, 0.01, 0), RoadNode(2, 0.01, 0.01), RoadNode(3, 0, 0.01)]
    net = RoadNetwork(nodes, [], coordinate_system="lonlat")
    side = 6_371_000 * math.radians(0.01) / 1000
    assert network_area_km2(net) == pytest.approx(side ** 2, rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 99), st.integers(0, 99))
def test_astar_exact_on_grid_property(o, d):
    net = _GRID10
    assert shortest_path(net, o, d).total_time_s == dijkstra_times(net, o)[net.index[d]]


_GRID10 = generate_grid(10, 10, 100, 36)
