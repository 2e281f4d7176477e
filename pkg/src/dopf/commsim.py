"""Discrete-event simulation of the agent communication network.

Store-and-forward messaging over half-duplex point-to-point links with
finite bandwidth and propagation delay. Links serialize one message at a
time (FIFO); routes are shortest-hop with deterministic tie-breaking.
Event ordering is total (time, then sequence number), so identical inputs
replay identical traces.
"""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field

HEADER_BYTES = 64
BYTES_PER_PHASE_QUANTITY = 24    # three 8-byte floats


class CommError(ValueError):
    pass


def message_size_bytes(n_quantities: int) -> int:
    """Wire size of a boundary message carrying n per-phase quantities."""
    return HEADER_BYTES + BYTES_PER_PHASE_QUANTITY * n_quantities


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    bandwidth_bps: float
    delay_s: float

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise CommError("bandwidth must be positive")
        if self.delay_s < 0:
            raise CommError("delay must be nonnegative")

    @property
    def key(self) -> tuple:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)


@dataclass(frozen=True)
class CommTopology:
    kind: str                        # ideal | ring | blackout | custom
    nodes: tuple
    links: tuple                     # of Link

    def neighbors(self, node: str) -> list:
        out = []
        for lk in self.links:
            if lk.a == node:
                out.append(lk.b)
            elif lk.b == node:
                out.append(lk.a)
        return sorted(set(out))

    def link_between(self, a: str, b: str) -> Link:
        for lk in self.links:
            if {lk.a, lk.b} == {a, b}:
                return lk
        raise CommError(f"no link {a}-{b}")

    def route(self, src: str, dst: str) -> list | None:
        """Shortest-hop node path, ties broken by lexicographic next hop."""
        if src == dst:
            return [src]
        frontier = [src]
        prev = {src: None}
        while frontier:
            nxt = []
            for u in sorted(frontier):
                for v in self.neighbors(u):
                    if v not in prev:
                        prev[v] = u
                        nxt.append(v)
            if dst in prev:
                break
            frontier = nxt
        if dst not in prev:
            return None
        path = [dst]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return list(reversed(path))

    def to_json(self) -> dict:
        return {"kind": self.kind,
                "bandwidth_bps": self.links[0].bandwidth_bps if self.links else None,
                "delay_s": self.links[0].delay_s if self.links else None,
                "nodes": list(self.nodes),
                "links": [[lk.a, lk.b] for lk in self.links]}


def _interleave(ids: list) -> list:
    ordered = sorted(ids)
    return ordered[0::2] + ordered[1::2]


def build_topology(kind: str, agents, interfaces=None, bandwidth_bps: float = 3000.0,
                   delay_s: float = 1e-4) -> CommTopology:
    """Build one of the named topologies over the agent set.

    ``ideal`` links every parent/child pair directly (requires
    ``interfaces`` as (parent, child) pairs); ``ring`` is a single cycle
    in interleaved id order, so electrically adjacent areas are generally
    not ring-adjacent; ``blackout`` has no links.
    """
    agents = [str(a) for a in agents]
    if bandwidth_bps <= 0:
        raise CommError("bandwidth must be positive")
    if kind == "ideal":
        if interfaces is None:
            raise CommError("ideal topology needs the interface list")
        links = tuple(Link(str(p), str(c), bandwidth_bps, delay_s)
                      for p, c in interfaces)
        return CommTopology(kind="ideal", nodes=tuple(agents), links=links)
    if kind == "ring":
        if len(agents) < 2:
            raise CommError("ring needs at least 2 nodes")
        order = _interleave(agents)
        links = tuple(Link(order[i], order[(i + 1) % len(order)],
                           bandwidth_bps, delay_s)
                      for i in range(len(order)))
        return CommTopology(kind="ring", nodes=tuple(agents), links=links)
    if kind in ("blackout", "none"):
        return CommTopology(kind="blackout", nodes=tuple(agents), links=())
    raise CommError(f"unknown topology kind {kind!r}")


def topology_from_json(doc: dict) -> CommTopology:
    links = tuple(Link(str(a), str(b), float(doc.get("bandwidth_bps", 3000.0)),
                       float(doc.get("delay_s", 1e-4)))
                  for a, b in doc.get("links", []))
    return CommTopology(kind=str(doc.get("kind", "custom")),
                        nodes=tuple(str(n) for n in doc.get("nodes", [])),
                        links=links)


def load_topology(path) -> CommTopology:
    with open(path) as fh:
        return topology_from_json(json.load(fh))


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)        # agent-tick | hop | deliver | drop
    payload: object = field(compare=False, default=None)


@dataclass
class TraceRow:
    time_s: float
    event: str
    link: str
    size_bytes: int
    msg_iteration: int


class EventLoop:
    """Single-threaded event queue owning all link state."""

    def __init__(self, topology: CommTopology):
        self.topology = topology
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._link_free: dict[tuple, float] = {}
        self.now = 0.0
        self.trace: list[TraceRow] = []
        self.delivered = 0
        self.dropped = 0

    def schedule(self, time: float, kind: str, payload=None):
        if time < self.now - 1e-12:
            raise CommError(f"event scheduled in the past ({time} < {self.now})")
        heapq.heappush(self._queue, Event(time, next(self._seq), kind, payload))

    def transmit(self, message, on_deliver, size_bytes: int, iteration: int,
                 src: str, dst: str):
        """Queue a message; it hops over the route, one link at a time."""
        route = self.topology.route(src, dst)
        if route is None or len(route) < 2:
            self.dropped += 1
            self.trace.append(TraceRow(self.now, "drop", f"{src}->{dst}",
                                       size_bytes, iteration))
            return
        self._hop(message, on_deliver, size_bytes, iteration, route, 0, self.now)

    def _hop(self, message, on_deliver, size_bytes, iteration, route, leg, t_ready):
        u, v = route[leg], route[leg + 1]
        link = self.topology.link_between(u, v)
        ser = size_bytes * 8.0 / link.bandwidth_bps
        start = max(t_ready, self._link_free.get(link.key, 0.0))
        self._link_free[link.key] = start + ser
        arrive = start + ser + link.delay_s
        self.trace.append(TraceRow(t_ready, "enqueue", f"{u}->{v}", size_bytes, iteration))
        if leg + 2 == len(route):
            self.schedule(arrive, "deliver",
                          (message, on_deliver, size_bytes, iteration, route, None))
        else:
            self.schedule(arrive, "hop",
                          (message, on_deliver, size_bytes, iteration, route, leg + 1))

    def run(self, until: float = float("inf")) -> float:
        """Process events in order until the queue drains or ``until``."""
        while self._queue and self._queue[0].time <= until:
            ev = heapq.heappop(self._queue)
            self.now = max(self.now, ev.time)
            if ev.kind == "deliver":
                message, on_deliver, size_bytes, iteration, route, _ = ev.payload
                self.delivered += 1
                self.trace.append(TraceRow(self.now, "deliver",
                                           f"{route[-2]}->{route[-1]}",
                                           size_bytes, iteration))
                on_deliver(self.now, message)
            elif ev.kind == "hop":
                message, on_deliver, size_bytes, iteration, route, leg = ev.payload
                self._hop(message, on_deliver, size_bytes, iteration, route, leg,
                          self.now)
            elif ev.kind == "agent-tick":
                callback = ev.payload
                callback(self.now)
            else:
                raise CommError(f"unknown event kind {ev.kind!r}")
        return self.now

    @property
    def pending(self) -> int:
        return len(self._queue)

    def write_trace_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "event", "link", "size_bytes", "msg_iteration"])
            for row in self.trace:
                w.writerow([f"{row.time_s:.6f}", row.event, row.link,
                            row.size_bytes, row.msg_iteration])
