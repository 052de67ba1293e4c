from itertools import combinations
from types import SimpleNamespace

import networkx as nx
import numpy as np
import pytest

from core.errors import CentralityConvergenceError, DisconnectedNetworkError
from core.graph_features import (
    aggregate,
    append_line_flow_rows,
    build_features,
    closeness_centrality,
    detect_communities,
    edge_betweenness,
    eigenvector_centrality,
    graph_signals,
    mask_unobserved,
    pmu_placement,
    preserves_locality,
    rank_nodes,
    select_aggregation_nodes,
    shift_powers,
    unobserved_nodes,
)
from core.grid_io import build_graph
from core.steady_state import solve_power_flow

from conftest import graph_from_edges

TWO_TRIANGLES = [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)]


def random_connected_edges(rng, n):
    edges = {(int(rng.integers(i)), i) for i in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        edges.add((i, j))
    return sorted(edges)


def test_shift_powers_match_dense_matrix_powers():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 15))
        graph = graph_from_edges(n, random_connected_edges(rng, n))
        x = rng.normal(size=(n, 3))
        k_len = int(rng.integers(1, 6))
        powers = shift_powers(graph, x, k_len)
        for k in range(k_len):
            np.testing.assert_allclose(powers[k], np.linalg.matrix_power(graph.shift, k) @ x,
                                       rtol=1e-12, atol=1e-12)


def test_first_row_is_the_raw_signal():
    graph = graph_from_edges(3, [(0, 1), (1, 2)])
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(aggregate(graph, x, 1, 1), [[2.0]])
    np.testing.assert_array_equal(aggregate(graph, x, 1, 3), [[2.0], [4.0], [4.0]])


def test_aggregate_rejects_bad_arguments():
    graph = graph_from_edges(3, [(0, 1), (1, 2)])
    with pytest.raises(ValueError):
        aggregate(graph, np.ones(3), 5, 2)
    with pytest.raises(ValueError):
        aggregate(graph, np.ones(3), 0, 0)
    with pytest.raises(ValueError):
        aggregate(graph, np.ones(4), 0, 2)


def test_features_are_bit_identical_under_relabelling():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(3, 20))
        edges = random_connected_edges(rng, n)
        perm = rng.permutation(n)
        graph = graph_from_edges(n, edges)
        relabelled = graph_from_edges(n, [tuple(sorted((int(perm[i]), int(perm[j])))) for i, j in edges])
        x = rng.normal(size=(n, 3))
        x_perm = np.empty_like(x)
        x_perm[perm] = x
        node = int(rng.integers(n))
        np.testing.assert_array_equal(aggregate(graph, x, node, 4), aggregate(relabelled, x_perm, int(perm[node]), 4))


def test_line_flow_rows(three_bus):
    flows = SimpleNamespace(line_p=[1.0, 2.0, 3.0], line_q=[0.0, -1.0, 5.0])
    block = append_line_flow_rows(np.zeros((2, 3)), three_bus, flows, 0)
    np.testing.assert_array_equal(block[2], [4.0, 2.0, 3.0])
    np.testing.assert_array_equal(block[3], [5.0, 2.5, 5.0])
    with pytest.raises(ValueError):
        append_line_flow_rows(np.zeros((2, 2)), three_bus, flows, 0)


def test_build_features_shape(ieee68):
    op = solve_power_flow(ieee68)
    graph = build_graph(ieee68)
    feats = build_features(ieee68, graph, graph_signals(ieee68, op), 3, [0, 10, 40])
    assert feats.z.shape == (5, 3, 3)
    assert feats.nodes == (0, 10, 40)
    np.testing.assert_array_equal(feats.z[0, :, 1], [op.v_mag[10], op.p_net[10], op.q_net[10]])


def test_mask_unobserved(three_bus):
    op = solve_power_flow(three_bus)
    signals = mask_unobserved(graph_signals(three_bus, op), [0])
    np.testing.assert_array_equal(signals.x[1:], 0.0)
    assert signals.line_p[1] == 0.0 and signals.line_q[1] == 0.0
    assert signals.line_p[0] == op.line_p[0]
    with pytest.raises(ValueError):
        mask_unobserved(graph_signals(three_bus, op), [7])


def test_locality_means_unchanged_features(ieee68):
    op = solve_power_flow(ieee68)
    graph = build_graph(ieee68)
    signals = graph_signals(ieee68, op)
    nodes, k_len = [select_aggregation_nodes(graph, 1)[0]], 3
    clean = build_features(ieee68, graph, signals, k_len, nodes).z
    rng = np.random.default_rng(3)
    preserved = 0
    for _ in range(100):
        hidden = sorted(rng.choice(graph.n, size=int(rng.integers(1, 8)), replace=False).tolist())
        if not preserves_locality(graph, ieee68, nodes, hidden, k_len):
            continue
        preserved += 1
        observed = [i for i in range(graph.n) if i not in hidden]
        masked = build_features(ieee68, graph, mask_unobserved(signals, observed), k_len, nodes).z
        np.testing.assert_array_equal(masked, clean)
    assert preserved > 0


def test_hiding_aggregation_node_breaks_locality(ieee68):
    graph = build_graph(ieee68)
    assert not preserves_locality(graph, ieee68, [5], [5], 3)
    assert preserves_locality(graph, ieee68, [5], [], 3)


def test_closeness_on_path():
    graph = graph_from_edges(3, [(0, 1), (1, 2)])
    np.testing.assert_allclose(closeness_centrality(graph), [1 / 3, 1 / 2, 1 / 3])


def test_disconnected_graph_rejected():
    graph = graph_from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(DisconnectedNetworkError):
        closeness_centrality(graph)


def test_eigenvector_centrality_matches_dense_eigenvector(ieee68):
    graph = build_graph(ieee68)
    w, v = np.linalg.eigh(graph.shift)
    dominant = np.abs(v[:, np.argmax(w)])
    np.testing.assert_allclose(eigenvector_centrality(graph), dominant / dominant.max(), atol=1e-9)


def test_eigenvector_residual_within_tolerance(ieee68):
    graph = build_graph(ieee68)
    c = eigenvector_centrality(graph)
    rho = c @ graph.shift @ c / (c @ c)
    assert np.linalg.norm(graph.shift @ c - rho * c) <= 1e-10 * np.linalg.norm(c)


def test_eigenvector_centrality_closed_forms():
    cycle = graph_from_edges(5, [(i, (i + 1) % 5) for i in range(5)])
    np.testing.assert_allclose(eigenvector_centrality(cycle), np.ones(5), atol=1e-10)
    star = graph_from_edges(5, [(0, i) for i in range(1, 5)])
    np.testing.assert_allclose(eigenvector_centrality(star), [1.0, 0.5, 0.5, 0.5, 0.5], atol=1e-10)
    path = graph_from_edges(3, [(0, 1), (1, 2)])
    np.testing.assert_allclose(eigenvector_centrality(path), [2 ** -0.5, 1.0, 2 ** -0.5], atol=1e-10)


def test_eigenvector_refinement_gives_up():
    path = graph_from_edges(6, [(i, i + 1) for i in range(5)])
    with pytest.raises(CentralityConvergenceError):
        eigenvector_centrality(path, tol=0.0, max_iter=5)


def brute_force_betweenness(n, edges):
    g = nx.Graph(edges)
    expected = {edge: 0.0 for edge in edges}
    for s, t in combinations(range(n), 2):
        paths = list(nx.all_shortest_paths(g, s, t))
        for path in paths:
            for a, b in zip(path, path[1:]):
                expected[(min(a, b), max(a, b))] += 1 / len(paths)
    return expected


def test_edge_betweenness_brute_force():
    graph = graph_from_edges(6, TWO_TRIANGLES)
    expected = brute_force_betweenness(6, TWO_TRIANGLES)
    got = edge_betweenness(graph)
    assert set(got) == set(expected)
    for edge, value in expected.items():
        assert got[edge] == pytest.approx(value)
    assert got[(2, 3)] == 9.0


def test_communities_split_at_the_bridge():
    graph = graph_from_edges(6, TWO_TRIANGLES)
    assert detect_communities(graph, 2) == [[0, 1, 2], [3, 4, 5]]
    assert detect_communities(graph, 1) == [list(range(6))]
    assert detect_communities(graph, 6) == [[i] for i in range(6)]
    with pytest.raises(ValueError):
        detect_communities(graph, 7)


def test_aggregation_node_choice():
    graph = graph_from_edges(6, TWO_TRIANGLES)
    assert rank_nodes(graph)[:2] == [2, 3]
    assert select_aggregation_nodes(graph, 1) == [2]
    assert select_aggregation_nodes(graph, 2) == [2, 3]


def test_pmu_placement_budget():
    graph = graph_from_edges(3, [(0, 1), (1, 2)])
    assert pmu_placement(graph, 1 / 3) == [1]
    assert pmu_placement(graph, 1.0) == [0, 1, 2]
    with pytest.raises(ValueError):
        pmu_placement(graph, 0.0)


def test_ieee68_placement_size(ieee68):
    assert len(pmu_placement(build_graph(ieee68), 0.3)) == 21


def test_unobserved_nodes_are_least_central():
    graph = graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    assert unobserved_nodes(graph, [2], 0.0) == []
    assert unobserved_nodes(graph, [2], 0.4) == [0, 4]


def test_unobserved_count_is_capped(caplog):
    graph = graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    assert unobserved_nodes(graph, [2], 0.99) == [0, 1, 3, 4]
    assert "cannot hide" in caplog.text


def test_edge_betweenness_on_random_graphs():
    rng = np.random.default_rng(21)
    for _ in range(40):
        n = int(rng.integers(2, 11))
        edges = random_connected_edges(rng, n)
        got = edge_betweenness(graph_from_edges(n, edges))
        expected = brute_force_betweenness(n, edges)
        assert set(got) == set(expected)
        for edge, value in expected.items():
            assert got[edge] == pytest.approx(value, abs=1e-12)


def test_protected_nodes_are_never_hidden():
    graph = graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    assert unobserved_nodes(graph, [2], 0.4, protected=[0]) == [3, 4]
    assert unobserved_nodes(graph, [2], 0.99, protected=[0, 4]) == [1, 3]


def test_placement_covers_the_aggregation_node(ieee68):
    graph = build_graph(ieee68)
    placement = pmu_placement(graph, 0.3)
    assert len(placement) == 21
    assert select_aggregation_nodes(graph, 1)[0] in placement


AREAS = [list(range(0, 47)), list(range(47, 94)), list(range(94, 140))]


def test_three_area_case_splits_into_its_areas(area140):
    graph = build_graph(area140)
    assert detect_communities(graph, 3) == AREAS


def test_three_area_case_gets_one_node_per_area(area140):
    chosen = select_aggregation_nodes(build_graph(area140), 3)
    assert len(chosen) == 3
    assert sorted(next(a for a, members in enumerate(AREAS) if node in members) for node in chosen) == [0, 1, 2]
