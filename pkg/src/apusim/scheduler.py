"""Static routing schedules for the output-multiplexed crossbar.

Every cycle each source broadcasts at most one activation and each
destination latches at most one broadcast line, so a cycle is a partial
matching between sources and destinations.  :func:`build_schedule` packs a
demand into as few cycles as possible and :func:`verify_schedule`
re-checks the result independently.
"""
from __future__ import annotations

import io
import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ApuError

IDLE = -1
STRATEGIES = ("matching", "greedy")


@dataclass(frozen=True)
class RoutingDemand:
    """Transfers ``(source, dest, activation)`` that must each happen once.

    Triples sharing a (source, dest) pair are delivered in the order they
    appear here, which callers set to the destination latch fill order.
    """

    num_sources: int
    num_dests: int
    triples: tuple

    def __post_init__(self):
        triples = tuple((int(s), int(d), int(a)) for s, d, a in self.triples)
        object.__setattr__(self, "triples", triples)
        if self.num_sources < 1 or self.num_dests < 1:
            raise ApuError("a routing demand needs at least one source and one destination")
        if len(set(triples)) != len(triples):
            raise ApuError("routing demand contains duplicate triples")
        for s, d, _ in triples:
            if not (0 <= s < self.num_sources and 0 <= d < self.num_dests):
                raise ApuError(f"triple ({s}, {d}) out of range for "
                               f"{self.num_sources}x{self.num_dests} crossbar")

    def counts(self) -> np.ndarray:
        c = np.zeros((self.num_sources, self.num_dests), dtype=np.int64)
        for s, d, _ in self.triples:
            c[s, d] += 1
        return c

    @property
    def lower_bound(self) -> int:
        """L*: the busiest source or destination sets the minimum length."""
        return lower_bound(self.counts())

    @property
    def balanced(self) -> bool:
        c = self.counts()
        sends, recvs = c.sum(axis=1), c.sum(axis=0)
        return bool(np.all(sends == sends[0]) and np.all(recvs == recvs[0]))


def lower_bound(counts) -> int:
    c = np.asarray(counts)
    if c.size == 0:
        return 0
    return int(max(c.sum(axis=1).max(), c.sum(axis=0).max()))


@dataclass(frozen=True)
class RoutingSchedule:
    num_sources: int
    num_dests: int
    cycles: tuple  # cycles[t] = tuple of (source, dest, activation)

    @property
    def length(self) -> int:
        return len(self.cycles)

    def transfers(self):
        for t, cyc in enumerate(self.cycles):
            for s, d, a in cyc:
                yield t, s, d, a

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("cycle,source,dest,activation_index\n")
        for t, s, d, a in self.transfers():
            out.write(f"{t},{s},{d},{a}\n")
        return out.getvalue()


def _regular_padding(counts: np.ndarray, delta: int) -> np.ndarray:
    """Dummy edges that make ``counts + dummy`` a ``delta``-regular multigraph."""
    n = counts.shape[0]
    row_need = delta - counts.sum(axis=1)
    col_need = delta - counts.sum(axis=0)
    dummy = np.zeros_like(counts)
    d = 0
    for s in range(n):
        while row_need[s] > 0:
            while col_need[d] == 0:
                d += 1
            k = min(row_need[s], col_need[d])
            dummy[s, d] += k
            row_need[s] -= k
            col_need[d] -= k
    return dummy


def _pair_queues(demand: RoutingDemand):
    queues = defaultdict(deque)
    for s, d, a in demand.triples:
        queues[(s, d)].append(a)
    return queues


def _matching_schedule(demand: RoutingDemand):
    n = max(demand.num_sources, demand.num_dests)
    counts = np.zeros((n, n), dtype=np.int64)
    counts[:demand.num_sources, :demand.num_dests] = demand.counts()
    delta = lower_bound(counts)
    if delta == 0:
        return ()
    dummy = _regular_padding(counts, delta)
    match, is_real = kernels.match_cycles(counts, dummy, delta)
    queues = _pair_queues(demand)
    cycles = []
    for t in range(delta):
        cyc = []
        for s in range(n):
            if is_real[t, s]:
                d = int(match[t, s])
                cyc.append((s, d, queues[(s, d)].popleft()))
        cycles.append(tuple(cyc))
    return tuple(cycles)


def _greedy_schedule(demand: RoutingDemand):
    """Per cycle, serve pairs by descending remaining demand, rotating ties."""
    counts = demand.counts()
    queues = _pair_queues(demand)
    ns, nd = demand.num_sources, demand.num_dests
    cycles = []
    t = 0
    remaining = int(counts.sum())
    while remaining:
        pairs = [(int(counts[s, d]), s, d) for s in range(ns) for d in range(nd) if counts[s, d]]
        pairs.sort(key=lambda p: (-p[0], (p[1] - t) % ns, (p[2] - t) % nd))
        used_s, used_d, cyc = set(), set(), []
        for _, s, d in pairs:
            if s in used_s or d in used_d:
                continue
            used_s.add(s)
            used_d.add(d)
            cyc.append((s, d, queues[(s, d)].popleft()))
            counts[s, d] -= 1
        remaining -= len(cyc)
        cycles.append(tuple(sorted(cyc)))
        t += 1
    return tuple(cycles)


def build_schedule(demand: RoutingDemand, strategy: str = "matching") -> RoutingSchedule:
    """Pack ``demand`` into conflict-free crossbar cycles.

    ``matching`` pads the demand to a regular bipartite multigraph and peels
    one perfect matching per cycle, so the length always equals the lower
    bound L*.  Sources with more outstanding sends are matched first and
    priority rotates among equals each cycle.  ``greedy`` builds each
    cycle's matching greedily without backtracking and may leave bubbles.
    """
    if strategy == "matching":
        cycles = _matching_schedule(demand)
    elif strategy == "greedy":
        cycles = _greedy_schedule(demand)
    else:
        raise ApuError(f"unknown scheduling strategy {strategy!r}; pick one of {STRATEGIES}")
    return RoutingSchedule(demand.num_sources, demand.num_dests, cycles)


@dataclass(frozen=True)
class Violation:
    kind: str
    cycle: int | None
    detail: str

    def __str__(self):
        where = f"cycle {self.cycle}: " if self.cycle is not None else ""
        return f"{where}{self.kind} {self.detail}"


@dataclass(frozen=True)
class ScheduleCheck:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first(self) -> Violation | None:
        return self.violations[0] if self.violations else None

    def __bool__(self):
        return self.ok


def verify_schedule(demand: RoutingDemand, sched: RoutingSchedule) -> ScheduleCheck:
    """Exhaustively re-check crossbar legality and exactly-once delivery."""
    wanted = set(demand.triples)
    seen = {}
    out = []
    for t, cyc in enumerate(sched.cycles):
        srcs, dsts = {}, {}
        for s, d, a in cyc:
            if not (0 <= s < demand.num_sources and 0 <= d < demand.num_dests):
                out.append(Violation("out of range", t, f"({s}, {d}, {a})"))
                continue
            if s in srcs:
                out.append(Violation("source used twice", t, f"source {s}"))
            if d in dsts:
                out.append(Violation("destination used twice", t, f"dest {d}"))
            srcs[s] = d
            dsts[d] = s
            key = (s, d, a)
            if key not in wanted:
                out.append(Violation("not in demand", t, str(key)))
            elif key in seen:
                out.append(Violation("delivered twice", t,
                                     f"{key} (first delivered in cycle {seen[key]})"))
            else:
                seen[key] = t
    for key in demand.triples:
        if key not in seen:
            out.append(Violation("undelivered", None, str(key)))
    return ScheduleCheck(tuple(out))


# ------------------------------------------------------------- select table

def select_width(num_sources: int) -> int:
    """Bits per select entry; one bit minimum so a lone source is still addressable."""
    return max(1, math.ceil(math.log2(num_sources))) if num_sources > 1 else 1


@dataclass(frozen=True, eq=False)
class SelectTable:
    """``table[d, t]`` is the source line destination ``d`` latches in cycle ``t``."""

    num_sources: int
    table: np.ndarray  # (num_dests, L), IDLE where the destination latches nothing

    @property
    def width(self) -> int:
        return select_width(self.num_sources)

    @property
    def num_dests(self) -> int:
        return self.table.shape[0]

    @property
    def length(self) -> int:
        return self.table.shape[1]

    @property
    def bits(self) -> int:
        return int(self.table.size) * self.width

    @property
    def idle_count(self) -> int:
        return int(np.count_nonzero(self.table == IDLE))

    def to_bytes(self) -> bytes:
        """Binary dump: header ``b"APUSEL1\\0"`` then little-endian uint32
        num_sources, num_dests, length, width, followed by one int16 per
        entry in dest-major order (-1 marks an idle slot)."""
        head = b"APUSEL1\0" + struct.pack("<4I", self.num_sources, self.num_dests,
                                          self.length, self.width)
        return head + self.table.astype("<i2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SelectTable":
        if data[:8] != b"APUSEL1\0":
            raise ApuError("not a select table dump")
        ns, nd, length, _ = struct.unpack("<4I", data[8:24])
        body = np.frombuffer(data[24:], dtype="<i2")
        if body.size != nd * length:
            raise ApuError("select table dump is truncated")
        return cls(ns, body.astype(np.int64).reshape(nd, length))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("dest,cycle,select\n")
        for d in range(self.num_dests):
            for t in range(self.length):
                out.write(f"{d},{t},{int(self.table[d, t])}\n")
        return out.getvalue()


def emit_selects(sched: RoutingSchedule, num_sources: int | None = None) -> SelectTable:
    ns = sched.num_sources if num_sources is None else num_sources
    table = np.full((sched.num_dests, sched.length), IDLE, dtype=np.int64)
    for t, s, d, _ in sched.transfers():
        table[d, t] = s
    return SelectTable(ns, table)


def broadcast_lists(sched: RoutingSchedule) -> np.ndarray:
    """``out[s, t]``: activation source ``s`` drives in cycle ``t`` (IDLE if none)."""
    out = np.full((sched.num_sources, sched.length), IDLE, dtype=np.int64)
    for t, s, _, a in sched.transfers():
        out[s, t] = a
    return out
