import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridinfer.grid import (
    CaseFormatError,
    GridValidationError,
    build_grid,
    bundled_case,
    default_sensor_buses,
    find_bridges,
    incidence_matrix,
    is_connected,
    load_grid,
    parse_matpower,
    read_case,
    reduce_grid,
)
from gridinfer.powerflow import solve_angles


def case_json(buses, branches, ref=None):
    doc = {"buses": [{"id": b} for b in buses],
           "branches": [{"from": f, "to": t, "x": x} for f, t, x in branches]}
    if ref is not None:
        doc["reference_bus"] = ref
    return json.dumps(doc)


def triangle():
    return load_grid(case_json([0, 1, 2], [(0, 1, 0.1), (1, 2, 0.1), (0, 2, 0.1)]))


def path3():
    return load_grid(case_json([0, 1, 2], [(0, 1, 0.1), (1, 2, 0.2)]))


def test_two_bus_minimal_case():
    g = load_grid(case_json([1, 2], [(1, 2, 0.5)], ref=1))
    assert (g.n_buses, g.n_branches) == (2, 1)
    assert g.branches[0].reactance == 0.5
    assert g.reference_bus == 0


def test_duplicate_branch_merged_in_parallel():
    g = load_grid(case_json([1, 2], [(1, 2, 0.2), (1, 2, 0.2)]))
    assert g.n_branches == 1
    assert g.branches[0].reactance == pytest.approx(0.1, rel=1e-15)


def test_parallel_merge_preserves_dc_flow():
    # raw edge list with two parallel pairs; oracle uses the unmerged Laplacian
    raw = [(0, 1, 0.2), (1, 2, 0.3), (0, 2, 0.25), (1, 2, 0.6), (2, 3, 0.1), (0, 1, 0.4)]
    g = build_grid([0, 1, 2, 3], raw, 0)
    assert g.n_branches == 4
    lap = np.zeros((4, 4))
    for f, t, x in raw:
        lap[[f, t], [f, t]] += 1 / x
        lap[f, t] -= 1 / x
        lap[t, f] -= 1 / x
    p = np.array([1.5, -0.5, 0.25, -1.25])
    expected = np.linalg.pinv(lap) @ p
    expected -= expected[0]
    np.testing.assert_allclose(solve_angles(g, g.all_active(), p), expected, atol=1e-12)


def test_bundled_ieee30():
    g = bundled_case("case30")
    assert g.n_buses == 30
    assert g.n_branches == 41
    assert g.bus_labels[g.reference_bus] == 1


def test_ieee30_reduction_gives_38_switchable():
    g = reduce_grid(bundled_case("case30"))
    assert g.n_switchable == 38
    bridges = {(g.bus_labels[b.from_bus], g.bus_labels[b.to_bus]) for b in g.branches if not b.switchable}
    assert bridges == {(9, 11), (12, 13), (25, 26)}


def test_reduce_triangle_and_path():
    assert reduce_grid(triangle()).n_switchable == 3
    assert reduce_grid(path3()).n_switchable == 0


def test_reduce_is_idempotent():
    g = reduce_grid(bundled_case("case30"))
    assert reduce_grid(g) == g


def test_incidence_two_bus():
    g = load_grid(case_json([0, 1], [(0, 1, 0.5)]))
    np.testing.assert_array_equal(incidence_matrix(g), [[1.0], [-1.0]])


def test_incidence_triangle_by_definition():
    np.testing.assert_array_equal(
        incidence_matrix(triangle()), [[1, 0, 1], [-1, 1, 0], [0, -1, -1]]
    )


def test_incidence_columns_ieee30():
    m = incidence_matrix(bundled_case("case30"))
    assert np.all(m.sum(axis=0) == 0)
    assert np.all((m == 1).sum(axis=0) == 1)
    assert np.all((m == -1).sum(axis=0) == 1)


def test_is_connected_examples():
    g = triangle()
    assert is_connected(g, [1, 1, 1])
    for i in range(3):
        s = [1, 1, 1]
        s[i] = 0
        assert is_connected(g, s)
    assert not is_connected(g, [1, 0, 0])
    with pytest.raises(ValueError):
        is_connected(g, [1, 1])


def test_matpower_parse_matches_bundled_json_roundtrip(tmp_path):
    g = bundled_case("case30")
    again = load_grid(g.to_json())
    assert again.to_dict() == g.to_dict()


def test_matpower_ignores_extra_columns_and_reads_slack():
    text = """
    mpc.bus = [
        7 1 0 0;
        8 3 0 0;
        9 1 0 0;
    ];
    mpc.branch = [ 7 8 0.01 0.5 0 0 0 0 0 0 1; 8 9 0.0 0.25 1 2 3; 7 9 0 0.2 ];
    """
    g = parse_matpower(text)
    assert g.bus_labels == (7, 8, 9)
    assert g.reference_bus == 1
    assert [b.reactance for b in g.branches] == [0.5, 0.25, 0.2]


def test_matpower_malformed_row_reports_line():
    text = "mpc.bus = [\n1 3;\n2 1;\n];\nmpc.branch = [\n1 2 0 0.1;\n1 2 0 abc;\n];\n"
    with pytest.raises(CaseFormatError) as err:
        parse_matpower(text)
    assert err.value.line == 7
    assert err.value.column == 7
    assert "line 7" in str(err.value)


def test_matpower_short_row():
    with pytest.raises(CaseFormatError, match="line 4"):
        parse_matpower("mpc.bus = [1 3;\n2 1];\nmpc.branch = [\n1 2 0];\n")


def test_json_syntax_error_has_position():
    with pytest.raises(CaseFormatError) as err:
        load_grid('{"buses": [\n  {"id": 1},,\n]}')
    assert err.value.line == 2


@pytest.mark.parametrize("branches, message", [
    ([(1, 2, 0.0)], "nonpositive reactance"),
    ([(1, 2, -0.1)], "nonpositive reactance"),
    ([(1, 1, 0.1)], "self-loop"),
    ([(1, 5, 0.1)], "unknown bus"),
])
def test_validation_errors(branches, message):
    with pytest.raises(GridValidationError, match=message):
        load_grid(case_json([1, 2, 3], branches + [(2, 3, 0.1)]))


def test_disconnected_baseline_rejected():
    with pytest.raises(GridValidationError, match="disconnected"):
        load_grid(case_json([1, 2, 3, 4], [(1, 2, 0.1), (3, 4, 0.1)]))


def test_bad_reference_bus():
    with pytest.raises(GridValidationError, match="reference"):
        load_grid(case_json([1, 2], [(1, 2, 0.1)], ref=9))


def test_read_case_counts_raw_branches():
    text = case_json([1, 2, 3], [(1, 2, 0.2), (1, 2, 0.2), (2, 3, 0.1)])
    g, raw = read_case(text)
    assert (raw, g.n_branches) == (3, 2)


def test_default_sensor_buses():
    g = bundled_case("case30")
    buses = default_sensor_buses(g, 19)
    assert len(buses) == 19 and buses == sorted(buses)
    deg = g.degrees()
    dropped = set(range(30)) - set(buses)
    assert max(deg[b] for b in dropped) <= min(deg[b] for b in buses)


def test_fingerprint_tracks_switchability():
    g = bundled_case("case30")
    assert g.fingerprint() != reduce_grid(g).fingerprint()
    assert len(g.fingerprint()) == 32


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(2, 9))
    # random spanning tree plus extra edges
    edges = {(draw(st.integers(0, i - 1)), i) for i in range(1, n)}
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=10))
    edges |= {(min(a, b), max(a, b)) for a, b in extra if a != b}
    return n, sorted(edges)


@settings(max_examples=100, deadline=None)
@given(connected_graphs())
def test_bridges_match_networkx(graph):
    n, edges = graph
    g = build_grid(list(range(n)), [(a, b, 0.1) for a, b in edges])
    ours = {(min(g.branches[i].from_bus, g.branches[i].to_bus),
             max(g.branches[i].from_bus, g.branches[i].to_bus)) for i in find_bridges(g)}
    theirs = {(min(a, b), max(a, b)) for a, b in nx.bridges(nx.Graph(edges))}
    assert ours == theirs
    reduced = reduce_grid(g)
    # bridges kept active: switchable lines alone never disconnect the all-active grid
    assert is_connected(reduced, np.ones(reduced.n_branches, dtype=np.uint8))
    assert reduce_grid(reduced) == reduced
