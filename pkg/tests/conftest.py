import pytest

from gradcode.graphs import Graph, gen_circulant, gen_named, gen_random_regular


def small_fixture_graphs():
    """Graphs small enough to enumerate every straggler subset."""
    graphs = {"triangle": gen_named("complete", 3)}
    for n in range(4, 8):
        graphs[f"C{n}"] = gen_named("cycle", n)
    graphs["K4"] = gen_named("complete", 4)
    graphs["K5"] = gen_named("complete", 5)
    graphs["path4"] = Graph(4, ((0, 1), (1, 2), (2, 3)))
    return graphs


def regular_fixture_graphs():
    graphs = {
        "K4": gen_named("complete", 4),
        "K6": gen_named("complete", 6),
        "C6": gen_named("cycle", 6),
        "C7": gen_named("cycle", 7),
        "circ8": gen_circulant(8, [1, 2]),
        "circ16": gen_circulant(16, [1, 8]),
        "rr16": gen_random_regular(16, 3, 7),
        "rr20_4": gen_random_regular(20, 4, 1),
        "rr30": gen_random_regular(30, 3, 2),
    }
    return graphs


@pytest.fixture
def triangle():
    return gen_named("complete", 3)


@pytest.fixture
def rr16():
    return gen_random_regular(16, 3, 7)
