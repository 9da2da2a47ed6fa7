import pytest

from cgsr import graphs
from cgsr.ingest import Session

# The six-node worked example: three sessions whose transition graph has the
# hand-checkable causality weights 1/2, 1/2, 1/2, 0, 2/3, 1.
FIG4_SESSIONS = [[1, 2, 3, 5, 4], [2, 3, 5], [1, 3, 2]]
FIG4_EFFECT_WEIGHTS = {
    (1, 2): 0.5, (1, 3): 0.5, (2, 3): 0.5, (3, 2): 0.0, (3, 5): 2.0 / 3.0, (5, 4): 1.0,
}

# Common-cause example: owning item 0 drives purchases of 1, 2 and 3, so the
# apparent 2 -> 3 transition should get zero causal weight.
PHONE_ITEMS = {"iphone": 0, "line": 1, "charger": 2, "shell": 3}
PHONE_SESSIONS = [[0, 1, 2, 3], [0, 2, 1], [0, 1, 3]]


@pytest.fixture
def fig4_graph():
    return graphs.build_session_graph(FIG4_SESSIONS, 6)


@pytest.fixture
def phone_graph():
    return graphs.build_session_graph(PHONE_SESSIONS, 4)


def toy_sessions(n=5):
    """Five-item, three-session instance used by gradient and model tests."""
    data = [[0, 1, 2, 4, 3], [1, 2, 4], [0, 2, 1]]
    return [Session(id=f"s{i}", items=items, start_ts=i) for i, items in enumerate(data)]


