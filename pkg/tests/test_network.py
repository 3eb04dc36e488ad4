import io
import json
import threading

import numpy as np
import pytest

from cadmm.errors import ConfigError, RoundAborted
from cadmm.network import NeighborGraph, SyncTransport, audit_locality


def test_graph_validation():
    with pytest.raises(ConfigError):
        NeighborGraph(np.array([[0, 1], [0, 0]], bool))
    with pytest.raises(ConfigError):
        NeighborGraph(np.eye(2, dtype=bool))
    with pytest.raises(ConfigError):
        NeighborGraph.from_edges(4, [(0, 1), (2, 3)]).validate()
    g = NeighborGraph.line(4)
    assert g.is_connected and g.neighbors(1) == (0, 2) and g.degree(3) == 1
    assert NeighborGraph.complete(5).edges == [(i, j) for i in range(5) for j in range(i + 1, 5)]


def test_within_radius():
    pos = np.array([[0.0, 0], [1.0, 0], [3.0, 0]])
    g = NeighborGraph.within_radius(pos, 1.5)
    assert g.edges == [(0, 1)]


def test_two_agents_swap():
    t = SyncTransport(NeighborGraph.complete(2))
    inbox = t.exchange(0, {0: "a", 1: "b"})
    assert inbox == {0: [(1, "b")], 1: [(0, "a")]}


def test_message_counts():
    g = NeighborGraph.complete(5)
    t = SyncTransport(g)
    inbox = t.exchange(0, {i: np.full(3, i) for i in range(5)})
    assert all(len(v) == 4 for v in inbox.values())
    assert t.messages_delivered == 20 == 2 * len(g.edges)
    assert [s for s, _ in inbox[3]] == [0, 1, 2, 4]
    star = SyncTransport(NeighborGraph.star(5))
    inbox = star.exchange(0, {i: i for i in range(5)})
    assert len(inbox[0]) == 4 and all(len(inbox[i]) == 1 for i in range(1, 5))


def test_missing_payload_names_agent():
    t = SyncTransport(NeighborGraph.complete(3))
    with pytest.raises(RoundAborted, match=r"\[1\]"):
        t.exchange(0, {0: 1, 2: 3})
    with pytest.raises(RoundAborted):
        t.exchange(5, {0: 1, 1: 2, 2: 3})


def test_threaded_post_collect_order():
    g = NeighborGraph.complete(4)
    t = SyncTransport(g)
    got = {}

    def agent(i):
        for r in range(3):
            t.post(r, i, (r, i))
            got[(r, i)] = t.collect(r, i, timeout=5)

    threads = [threading.Thread(target=agent, args=(i,)) for i in reversed(range(4))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for r in range(3):
        for i in range(4):
            assert got[(r, i)] == [(j, (r, j)) for j in g.neighbors(i)]


def test_collect_timeout_names_missing():
    t = SyncTransport(NeighborGraph.complete(2))
    t.post(0, 0, "x")
    with pytest.raises(RoundAborted, match=r"\[1\]"):
        t.collect(0, 0, timeout=0.05)


def test_locality_audit():
    g = NeighborGraph.line(3)
    t = SyncTransport(g, record=True)
    out = {0: 0, 1: 1, 2: 2}
    t.exchange(0, out)
    assert audit_locality(t, g) == []
    assert not any(reader == 0 and src == 2 for _, reader, src in t.reads)
    t.read(1, 0, 2, out)
    (v,) = audit_locality(t, g)
    assert (v.round, v.reader, v.source) == (1, 0, 2)


def test_round_dump():
    buf = io.StringIO()
    t = SyncTransport(NeighborGraph.complete(2), dump=buf)
    t.exchange(0, {0: np.array([3.0, 4.0]), 1: np.zeros(2)})
    lines = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert lines[0] == {"round": 0, "sender": 1, "receiver": 0, "payload_norm": 0.0}
    assert lines[1]["payload_norm"] == 5.0
