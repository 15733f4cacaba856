import math

import numpy as np
import pytest

from gradcode.assignment import graph_scheme
from gradcode.graphs import (
    EdgeListError, Graph, format_edge_list, gen_circulant, gen_named, gen_random_regular, load_edge_list,
    mixing_check, parse_edge_list, save_edge_list, spectral_profile,
)

from conftest import regular_fixture_graphs


def test_random_regular_16_vertices():
    g = gen_random_regular(16, 3, 7)
    assert g.m == 24
    assert set(g.degree) == {3}
    assert not g.vertex_transitive


def test_random_regular_forced_k4():
    for seed in range(5):
        assert gen_random_regular(4, 3, seed).edges == gen_named("complete", 4).edges


def test_random_regular_parity_and_range():
    with pytest.raises(ValueError, match="even"):
        gen_random_regular(5, 3, 0)
    with pytest.raises(ValueError):
        gen_random_regular(4, 4, 0)


def test_random_regular_deterministic():
    a = gen_random_regular(50, 4, 123)
    b = gen_random_regular(50, 4, 123)
    assert a.edges == b.edges
    assert gen_random_regular(50, 4, 124).edges != a.edges


@pytest.mark.parametrize("n,d", [(10, 3), (12, 5), (40, 4), (101, 4)])
def test_random_regular_is_simple_regular(n, d):
    g = gen_random_regular(n, d, 3)
    assert set(g.degree) == {d}
    assert 2 * g.m == n * d
    assert len(set(g.edges)) == g.m


def test_random_regular_budget_exhaustion_reports_attempts():
    # a pairing is simple with probability about exp(-(d^2-1)/4), so d=9 never succeeds within 10nd tries
    with pytest.raises(RuntimeError, match="after 900 attempts"):
        gen_random_regular(10, 9, 0)


def test_circulant_examples():
    c6 = gen_circulant(6, [1])
    assert c6.edges == gen_named("cycle", 6).edges
    assert c6.regular_degree() == 2
    k5 = gen_circulant(5, [1, 2])
    assert k5.edges == gen_named("complete", 5).edges
    g = gen_circulant(8, [1, 2])
    assert g.m == 16 and g.regular_degree() == 4 and g.vertex_transitive
    half = gen_circulant(16, [1, 8])
    assert half.m == 24 and half.regular_degree() == 3


def test_circulant_errors():
    with pytest.raises(ValueError):
        gen_circulant(8, [1, 1])
    with pytest.raises(ValueError):
        gen_circulant(8, [5])
    with pytest.raises(ValueError):
        gen_circulant(8, [])


def test_named():
    k4 = gen_named("complete", 4)
    assert k4.m == 6 and k4.regular_degree() == 3
    c4 = gen_named("cycle", 4)
    assert c4.m == 4 and c4.regular_degree() == 2
    assert list(c4.edges) == sorted(c4.edges)
    with pytest.raises(ValueError):
        gen_named("cycle", 2)


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError, match="self-loop"):
        Graph(3, ((0, 0),))
    with pytest.raises(ValueError, match="out of range"):
        Graph(3, ((0, 3),))
    with pytest.raises(ValueError, match="parallel"):
        Graph(3, ((0, 1), (1, 0)))


def test_edge_list_path_graph():
    g = parse_edge_list("4 3 vt=0\n0 1\n1 2\n2 3\n")
    assert g.edges == ((0, 1), (1, 2), (2, 3))
    assert g.degree == (1, 2, 2, 1)
    assert not g.vertex_transitive


def test_edge_list_errors_carry_line_numbers():
    with pytest.raises(EdgeListError) as err:
        parse_edge_list("3 2 vt=0\n0 1\n2 2\n")
    assert err.value.lineno == 3
    with pytest.raises(EdgeListError) as err:
        parse_edge_list("3 1 vt=0\n0 7\n")
    assert err.value.lineno == 2
    with pytest.raises(EdgeListError) as err:
        parse_edge_list("3 1 vt=0\n0 x\n")
    assert err.value.lineno == 2
    with pytest.raises(EdgeListError):
        parse_edge_list("3 1\n0 1\n")


def test_edge_list_round_trip(tmp_path):
    src = tmp_path / "g.txt"
    src.write_text("5 4 vt=1\n1 0\n2 1\n3 2\n4 3\n")
    g = load_edge_list(src)
    assert g.vertex_transitive
    out = tmp_path / "h.txt"
    save_edge_list(g, out)
    assert out.read_text() == "5 4 vt=1\n0 1\n1 2\n2 3\n3 4\n"
    save_edge_list(load_edge_list(out), tmp_path / "k.txt")
    assert (tmp_path / "k.txt").read_bytes() == out.read_bytes()
    rr = gen_random_regular(16, 3, 7)
    assert parse_edge_list(format_edge_list(rr)) == rr


def test_spectral_examples():
    k4 = spectral_profile(gen_named("complete", 4))
    assert k4.lambda2 == pytest.approx(-1, abs=1e-8)
    assert k4.gap == pytest.approx(4, abs=1e-8)
    c4 = spectral_profile(gen_named("cycle", 4))
    assert c4.lambda2 == pytest.approx(0, abs=1e-8)
    assert c4.gap == pytest.approx(2, abs=1e-8)
    c6 = spectral_profile(gen_named("cycle", 6))
    assert c6.lambda2 == pytest.approx(1, abs=1e-8)
    assert c6.gap == pytest.approx(1, abs=1e-8)


def test_complete_graph_gap_equals_n():
    for n in range(3, 65):
        assert spectral_profile(gen_named("complete", n)).gap == pytest.approx(n, abs=1e-8)


def test_spectral_profile_rejects_irregular():
    with pytest.raises(ValueError):
        spectral_profile(Graph(4, ((0, 1), (1, 2), (2, 3))))


def test_disconnected_lambda2_equals_d():
    two_triangles = Graph(6, ((0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)))
    prof = spectral_profile(two_triangles)
    assert prof.lambda2 == pytest.approx(2, abs=1e-8)
    assert prof.gap == pytest.approx(0, abs=1e-8)


@pytest.mark.parametrize("name,g", list(regular_fixture_graphs().items()))
def test_sigma2_matches_assignment_singular_value(name, g):
    prof = spectral_profile(g)
    assert prof.sigma2_assignment**2 - (prof.d + prof.lambda2) == pytest.approx(0, abs=1e-8)
    a = graph_scheme(g).matrix
    sv = np.linalg.svd(a, compute_uv=False)
    assert sv[1] == pytest.approx(prof.sigma2_assignment, abs=1e-8)


def test_power_iteration_branch_matches_dense(monkeypatch):
    import gradcode.graphs as graphs

    g = gen_random_regular(60, 3, 4)
    dense = spectral_profile(g)
    monkeypatch.setattr(graphs, "DENSE_EIG_LIMIT", 10)
    sparse = spectral_profile(g)
    assert sparse.lambda2 == pytest.approx(dense.lambda2, abs=1e-6)
    assert sparse.lambda_min == pytest.approx(dense.lambda_min, abs=1e-6)


def test_mixing_examples():
    k4 = gen_named("complete", 4)
    lhs, rhs = mixing_check(k4, {0}, {1, 2, 3})
    assert lhs == 3
    assert rhs == pytest.approx(1.5)
    assert lhs >= rhs
    for g in regular_fixture_graphs().values():
        assert mixing_check(g, set(), {0}) == (0, 0.0)
    c6 = gen_named("cycle", 6)
    lhs, rhs = mixing_check(c6, {0, 2, 4}, {0, 2, 4})
    assert lhs == 0
    assert rhs <= 1e-12


@pytest.mark.parametrize("name,g", list(regular_fixture_graphs().items()))
def test_mixing_lemma_random_sets(name, g):
    rng = np.random.default_rng(hash(name) % 2**32)
    prof = spectral_profile(g)
    pairs = []
    for _ in range(200):
        S = set(np.flatnonzero(rng.random(g.n) < rng.random()).tolist())
        T = set(np.flatnonzero(rng.random(g.n) < rng.random()).tolist())
        pairs.append((S, T))
    if g.n <= 10:
        pairs += [({u}, {v}) for u in range(g.n) for v in range(g.n)]
    for S, T in pairs:
        lhs, rhs = mixing_check(g, S, T, prof)
        assert lhs >= rhs - 1e-9, (S, T)
