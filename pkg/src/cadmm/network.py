"""Simulated synchronous message passing over a neighbor graph.

Agents talk only through :class:`SyncTransport`. Each exchange round is a
barrier: every agent posts exactly one payload, and an agent's inbox is
released once all payloads for the round have arrived. Inboxes are ordered by
sender id so that any reduction over neighbor data has a fixed floating point
summation order.

Every delivery is logged as a read ``(round, reader, source)`` when recording
is enabled; :func:`audit_locality` checks the log against the graph.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RoundAborted


@dataclass(frozen=True)
class NeighborGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigError("adjacency must be a square matrix")
        if not np.array_equal(adj, adj.T):
            raise ConfigError("adjacency must be symmetric")
        if np.any(np.diag(adj)):
            raise ConfigError("adjacency must not contain self-loops")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "_nbrs", tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in adj))

    @property
    def N(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._nbrs[i]

    def degree(self, i: int) -> int:
        return len(self._nbrs[i])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.N) for j in self._nbrs[i] if i < j]

    def is_connected(self) -> bool:
        if self.N <= 1:
            return True
        seen = {0}
        queue = deque([0])
        while queue:
            for j in self._nbrs[queue.popleft()]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.N

    def validate(self) -> "NeighborGraph":
        if not self.is_connected():
            raise ConfigError("neighbor graph is not connected")
        return self

    @classmethod
    def from_edges(cls, N: int, edges) -> "NeighborGraph":
        adj = np.zeros((N, N), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(adj)

    @classmethod
    def complete(cls, N: int) -> "NeighborGraph":
        return cls(~np.eye(N, dtype=bool))

    @classmethod
    def line(cls, N: int) -> "NeighborGraph":
        return cls.from_edges(N, [(i, i + 1) for i in range(N - 1)])

    @classmethod
    def star(cls, N: int, center: int = 0) -> "NeighborGraph":
        return cls.from_edges(N, [(center, j) for j in range(N) if j != center])

    @classmethod
    def within_radius(cls, positions, radius: float) -> "NeighborGraph":
        p = np.asarray(positions, dtype=float)
        dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        adj = dist <= radius
        np.fill_diagonal(adj, False)
        return cls(adj)


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    receiver: int
    round: int
    payload: np.ndarray


@dataclass(frozen=True)
class LocalityViolation:
    round: int
    reader: int
    source: int


class SyncTransport:
    """Lock-step transport; safe to use from one thread per agent.

    ``exchange`` runs a whole round for a serial caller. Threaded workers use
    ``post`` followed by ``collect``; ``collect`` blocks until every agent has
    posted for that round.
    """

    def __init__(self, graph: NeighborGraph, record: bool = False, dump=None):
        self.graph = graph
        self.record = record
        self.dump = dump
        self.next_round = 0
        self.messages_delivered = 0
        self.reads: list[tuple[int, int, int]] = []
        self._cond = threading.Condition()
        self._pending: dict[int, dict[int, np.ndarray]] = {}
        self._collected: dict[int, set] = {}
        self._aborted: str | None = None

    def abort(self, reason: str):
        with self._cond:
            self._aborted = reason
            self._cond.notify_all()

    def _deliver(self, round_, outbox):
        missing = [i for i in range(self.graph.N) if i not in outbox]
        if missing:
            raise RoundAborted(f"round {round_}: no payload from agent(s) {missing}")
        if round_ != self.next_round:
            raise RoundAborted(f"expected round {self.next_round}, got {round_}")
        self.next_round += 1
        inboxes = {}
        for i in range(self.graph.N):
            inbox = []
            for j in self.graph.neighbors(i):
                inbox.append((j, outbox[j]))
                if self.record:
                    self.reads.append((round_, i, j))
                if self.dump is not None:
                    self._dump(RoundMessage(j, i, round_, outbox[j]))
            inboxes[i] = inbox
            self.messages_delivered += len(inbox)
        return inboxes

    def _dump(self, msg: RoundMessage):
        self.dump.write(json.dumps({
            "round": msg.round, "sender": msg.sender, "receiver": msg.receiver,
            "payload_norm": float(np.linalg.norm(msg.payload))}) + "\n")

    def exchange(self, round_: int, outbox) -> dict[int, list[tuple[int, np.ndarray]]]:
        """Deliver one round. ``outbox`` maps every agent id to its payload."""
        with self._cond:
            return self._deliver(round_, dict(outbox))

    def post(self, round_: int, sender: int, payload):
        with self._cond:
            if self._aborted:
                raise RoundAborted(self._aborted)
            slot = self._pending.setdefault(round_, {})
            if sender in slot:
                raise RoundAborted(f"round {round_}: agent {sender} posted twice")
            slot[sender] = payload
            if len(slot) == self.graph.N:
                self._pending[round_] = self._deliver(round_, slot)
                self._collected[round_] = set()
                self._cond.notify_all()

    def collect(self, round_: int, receiver: int, timeout: float | None = None):
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._aborted or round_ in self._collected, timeout=timeout)
            if self._aborted:
                raise RoundAborted(self._aborted)
            if not ok:
                missing = [i for i in range(self.graph.N) if i not in self._pending.get(round_, {})]
                raise RoundAborted(f"round {round_}: timed out waiting for agent(s) {missing}")
            inbox = self._pending[round_][receiver]
            done = self._collected[round_]
            done.add(receiver)
            if len(done) == self.graph.N:
                del self._pending[round_], self._collected[round_]
            return inbox

    def read(self, round_: int, reader: int, source: int, outbox):
        """Direct read of another agent's payload; logged so the audit can see it."""
        self.reads.append((round_, reader, source))
        return outbox[source]


def audit_locality(trace, graph: NeighborGraph) -> list[LocalityViolation]:
    """Every read in ``trace`` whose source is not a neighbor of the reader."""
    if isinstance(trace, SyncTransport):
        trace = trace.reads
    out = []
    for round_, reader, source in trace:
        if source != reader and not graph.adjacency[reader, source]:
            out.append(LocalityViolation(round_, reader, source))
    return out
