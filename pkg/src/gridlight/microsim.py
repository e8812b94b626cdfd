"""Deterministic discrete-time traffic microsimulation.

Point-queue model on a road network: a vehicle entering an edge travels its
full length at free speed, reaching the stop line after ceil(length/speed)
ticks, then joins the per-lane FIFO queue. Each tick the queue head may
cross the intersection if its movement has green, the lane's saturation
headway has elapsed since the last crossing, and the target lane has space.
Queued vehicles stand still, so they are "halting" and accumulate waiting
time; running vehicles move at free speed. All timing is integer ticks of
`dt_s` seconds, which keeps waiting-time bookkeeping exact.

Demand, routing and emergency road closures live here too. Routes are
shortest paths by free-flow time with U-turns forbidden; closures trigger a
single reroute sweep when they start and another when they lift.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
import heapq

import numpy as np

from .roadnet import Approach, Movement, PhaseTable, RoadNetwork, Turn


class NoRouteError(Exception):
    """No path exists between the requested endpoints given closures."""


@dataclass(frozen=True)
class SimParams:
    dt_s: float = 1.0
    free_speed_mps: float = 13.89
    vehicle_length_m: float = 7.5
    service_headway_s: float = 2.0
    stop_speed_mps: float = 0.1

    def __post_init__(self) -> None:
        if self.dt_s <= 0 or self.free_speed_mps <= 0 or self.vehicle_length_m <= 0:
            raise ValueError("dt_s, free_speed_mps and vehicle_length_m must be positive")
        if self.service_headway_s <= 0:
            raise ValueError("service_headway_s must be positive")
        if self.dt_s > self.service_headway_s:
            raise ValueError("dt_s must not exceed service_headway_s")

    def lane_capacity(self, length_m: float) -> int:
        return max(1, int(length_m // self.vehicle_length_m))

    def travel_ticks(self, length_m: float) -> int:
        return max(1, math.ceil(length_m / self.free_speed_mps / self.dt_s))


class VehicleState(IntEnum):
    PENDING = 0   # not yet due, or due but stuck in the entry backlog
    RUNNING = 1   # traversing an edge at free speed
    QUEUED = 2    # halted in a stop-line FIFO
    ARRIVED = 3


@dataclass(slots=True)
class Vehicle:
    vid: int
    origin: str
    destination: str
    depart_s: float
    route: list[str]
    state: VehicleState = VehicleState.PENDING
    route_pos: int = -1
    lane: int = 0
    stopline_at_s: float = 0.0
    queue_join_s: float = 0.0
    wait_done_s: float = 0.0   # waiting accumulated in finished queue stints
    next_turn: Turn | None = None
    no_route: bool = False

    @property
    def current_edge(self) -> str | None:
        if self.state in (VehicleState.RUNNING, VehicleState.QUEUED):
            return self.route[self.route_pos]
        return None

    def waiting_s(self, now: float) -> float:
        """Total accumulated waiting time up to the clock `now`."""
        if self.state is VehicleState.QUEUED:
            return self.wait_done_s + (now - self.queue_join_s)
        return self.wait_done_s


@dataclass(frozen=True)
class BlockEvent:
    """Emergency closure of a set of directed edges over [start_s, end_s)."""

    edges: tuple[str, ...]
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if not self.edges:
            raise ValueError("BlockEvent needs at least one edge")
        if not self.start_s < self.end_s:
            raise ValueError(f"empty block window [{self.start_s}, {self.end_s})")


@dataclass(frozen=True)
class LaneStats:
    vehicle_count: int
    halting_count: int
    mean_speed_mps: float


class _Lane:
    __slots__ = ("running", "queue", "next_service_s")

    def __init__(self) -> None:
        self.running: deque[tuple[float, Vehicle]] = deque()
        self.queue: deque[Vehicle] = deque()
        self.next_service_s = 0.0

    def count(self) -> int:
        return len(self.running) + len(self.queue)


@dataclass(slots=True)
class SignalState:
    phase: int = 0
    time_in_phase_s: float = 0.0
    yellow_left_s: float = 0.0
    pending_phase: int = -1

    @property
    def in_yellow(self) -> bool:
        return self.yellow_left_s > 0.0


class Simulation:
    """Mutable simulation state plus the tick update.

    Vehicles are cloned from `demand` so one demand list can seed many
    episodes. Scheduled `block_events` apply automatically when the clock
    enters their window; `apply_block`/`lift_block` do the same by hand.
    """

    def __init__(
        self,
        net: RoadNetwork,
        phase_table: PhaseTable,
        demand: list[Vehicle],
        params: SimParams | None = None,
        block_events: tuple[BlockEvent, ...] | list[BlockEvent] = (),
    ) -> None:
        self.net = net
        self.phase_table = phase_table
        self.params = params or SimParams()
        self.clock_s = 0.0
        self.vehicles = [
            Vehicle(v.vid, v.origin, v.destination, v.depart_s, list(v.route))
            for v in demand
        ]
        self._pending = deque(sorted(self.vehicles, key=lambda v: (v.depart_s, v.vid)))
        self._backlog: deque[Vehicle] = deque()
        self._noroute: dict[int, Vehicle] = {}
        self.lanes: dict[tuple[str, int], _Lane] = {
            (eid, li): _Lane()
            for eid in sorted(net.edges)
            for li in range(net.edges[eid].lanes)
        }
        self.signals: dict[str, SignalState] = {
            n: SignalState() for n in net.signal_nodes
        }
        self.spawned = 0
        self.arrived = 0
        self.closed: set[str] = set()
        self.noroute_log: list[tuple[float, int]] = []
        self.flow_bins: dict[str, dict[int, int]] = {eid: {} for eid in net.edges}
        # Static per-edge lookups, hot in the tick loop.
        self._cap = {eid: self.params.lane_capacity(e.length_m) for eid, e in net.edges.items()}
        self._ticks = {eid: self.params.travel_ticks(e.length_m) for eid, e in net.edges.items()}
        self._approach = {eid: net.approach_of(eid) for eid in net.edges}
        self._to = {eid: e.to for eid, e in net.edges.items()}
        self._green: dict[str, frozenset[Movement] | None] = {n: None for n in self.signals}
        self._route_cache: dict[tuple[str, str | None, str], tuple[str, ...]] = {}
        self._events = sorted(block_events, key=lambda ev: (ev.start_s, ev.end_s, ev.edges))
        for ev in self._events:
            for eid in ev.edges:
                if eid not in net.edges:
                    raise ValueError(f"block event references unknown edge {eid!r}")
        self._starts = sorted(
            [(ev.start_s, i) for i, ev in enumerate(self._events)]
        )
        self._ends = sorted([(ev.end_s, i) for i, ev in enumerate(self._events)])
        self._active_events: set[int] = set()

    # -- signals -----------------------------------------------------------

    def request_phase(self, node: str, phase: int) -> bool:
        """Ask a signal to change phase. Ignored (returns False) while the
        signal is in yellow, before min-hold has elapsed, or when the phase
        is already active."""
        sig = self.signals.get(node)
        if sig is None:
            raise ValueError(f"{node!r} is not a signalized node")
        if not 0 <= phase < self.phase_table.n_phases:
            raise ValueError(
                f"phase {phase} out of range 0..{self.phase_table.n_phases - 1}"
            )
        if sig.in_yellow or sig.phase == phase:
            return False
        if sig.time_in_phase_s < self.phase_table.min_hold_s:
            return False
        if self.phase_table.yellow_s == 0:
            sig.phase = phase
            sig.time_in_phase_s = 0.0
        else:
            sig.pending_phase = phase
            sig.yellow_left_s = self.phase_table.yellow_s
        self._green[node] = None
        return True

    def _greens(self, node: str) -> frozenset[Movement]:
        cached = self._green[node]
        if cached is not None:
            return cached
        sig = self.signals[node]
        if sig.in_yellow:
            # During yellow only movements green in BOTH phases keep moving.
            movs = self.phase_table.phases[sig.phase] & self.phase_table.phases[sig.pending_phase]
        else:
            movs = self.phase_table.phases[sig.phase]
        rights = frozenset((a, Turn.RIGHT) for a in Approach)
        out = frozenset(movs) | rights
        self._green[node] = out
        return out

    def movement_allowed(self, node: str, m: Movement) -> bool:
        if node not in self.signals:
            return True
        return m in self._greens(node)

    def _update_signals(self, dt: float) -> None:
        for node, sig in self.signals.items():
            if sig.in_yellow:
                sig.yellow_left_s -= dt
                if sig.yellow_left_s <= 1e-9:
                    sig.yellow_left_s = 0.0
                    sig.phase = sig.pending_phase
                    sig.pending_phase = -1
                    sig.time_in_phase_s = 0.0
                    self._green[node] = None
            else:
                sig.time_in_phase_s += dt

    # -- block events ------------------------------------------------------

    def apply_block(self, ev: BlockEvent) -> None:
        """Close the event's edges and reroute affected vehicles. Entering
        a closed edge is forbidden; vehicles already on one finish it."""
        self.closed |= set(ev.edges)
        self._route_cache.clear()
        self._reroute(touched_only=True)

    def lift_block(self, ev: BlockEvent) -> None:
        self.closed -= set(ev.edges)
        # Re-add edges still closed by an overlapping active event.
        for i in self._active_events:
            self.closed |= set(self._events[i].edges)
        self._route_cache.clear()
        self._reroute(touched_only=False)

    def _process_events(self) -> None:
        while self._starts and self._starts[0][0] <= self.clock_s + 1e-9:
            _, i = self._starts.pop(0)
            self._active_events.add(i)
            self.apply_block(self._events[i])
        while self._ends and self._ends[0][0] <= self.clock_s + 1e-9:
            _, i = self._ends.pop(0)
            self._active_events.discard(i)
            self.lift_block(self._events[i])

    # -- routing -----------------------------------------------------------

    def _shortest(self, node: str, from_edge: str | None, dest: str) -> tuple[str, ...]:
        """Shortest continuation from `node`, not reversing onto `from_edge`."""
        banned = self.net.reverse_edge(from_edge) if from_edge else None
        key = (node, banned, dest)
        hit = self._route_cache.get(key)
        if hit is not None:
            return hit
        route = shortest_route(self.net, node, dest, frozenset(self.closed), banned)
        out = tuple(route)
        self._route_cache[key] = out
        return out

    def _reroute(self, touched_only: bool) -> None:
        for v in self.vehicles:
            if v.state is VehicleState.ARRIVED:
                continue
            if v.state is VehicleState.PENDING:
                remaining = v.route
                if touched_only and not any(e in self.closed for e in remaining):
                    continue
                try:
                    v.route = list(self._shortest(v.origin, None, v.destination))
                    self._clear_noroute(v)
                except NoRouteError:
                    self._flag_noroute(v)
                continue
            # RUNNING / QUEUED: may finish the current edge even if closed.
            future = v.route[v.route_pos + 1 :]
            if not future:
                continue
            if touched_only and not any(e in self.closed for e in future):
                continue
            cur = v.route[v.route_pos]
            try:
                cont = self._shortest(self._to[cur], cur, v.destination)
                v.route = v.route[: v.route_pos + 1] + list(cont)
                v.next_turn = self.net.turn_between(cur, cont[0])
                self._clear_noroute(v)
            except NoRouteError:
                self._flag_noroute(v)

    def _flag_noroute(self, v: Vehicle) -> None:
        if not v.no_route:
            v.no_route = True
            self._noroute[v.vid] = v
            self.noroute_log.append((self.clock_s, v.vid))

    def _clear_noroute(self, v: Vehicle) -> None:
        if v.no_route:
            v.no_route = False
            self._noroute.pop(v.vid, None)

    def _retry_noroute(self) -> None:
        for v in list(self._noroute.values()):
            if v.state is VehicleState.PENDING:
                try:
                    v.route = list(self._shortest(v.origin, None, v.destination))
                    self._clear_noroute(v)
                except NoRouteError:
                    pass
            else:
                cur = v.route[v.route_pos]
                try:
                    cont = self._shortest(self._to[cur], cur, v.destination)
                    v.route = v.route[: v.route_pos + 1] + list(cont)
                    v.next_turn = self.net.turn_between(cur, cont[0])
                    self._clear_noroute(v)
                except NoRouteError:
                    pass

    # -- tick update -------------------------------------------------------

    def step(self, dt: float | None = None) -> None:
        """Advance the simulation one tick of `dt` seconds (default
        params.dt_s). Order: clock, block events, signals, entries, flows."""
        if dt is None:
            dt = self.params.dt_s
        if dt <= 0 or dt > self.params.service_headway_s:
            raise ValueError("dt must be in (0, service_headway_s]")
        self.clock_s += dt
        now = self.clock_s
        self._process_events()
        self._update_signals(dt)
        if self._noroute:
            self._retry_noroute()
        self._process_entries(now)
        self._advance_lanes(now)

    def _lane_for(self, edge: str, turn: Turn | None) -> int:
        if turn is Turn.LEFT:
            return 0
        if turn is Turn.RIGHT:
            return 2
        # Straight (or final edge): balance across lanes 1 and 2.
        l1 = self.lanes[(edge, 1)].count()
        l2 = self.lanes[(edge, 2)].count()
        return 2 if l2 < l1 else 1

    def _turn_after(self, v: Vehicle, pos: int) -> Turn | None:
        if pos + 1 >= len(v.route):
            return None
        return self.net.turn_between(v.route[pos], v.route[pos + 1])

    def _enter_edge(self, v: Vehicle, pos: int, now: float) -> bool:
        edge = v.route[pos]
        if edge in self.closed:
            return False
        turn = self._turn_after(v, pos)
        lane = self._lane_for(edge, turn)
        lane_state = self.lanes[(edge, lane)]
        if lane_state.count() >= self._cap[edge]:
            return False
        v.state = VehicleState.RUNNING
        v.route_pos = pos
        v.lane = lane
        v.next_turn = turn
        v.stopline_at_s = now + self._ticks[edge] * self.params.dt_s
        lane_state.running.append((v.stopline_at_s, v))
        minute = int(now // 60.0)
        bins = self.flow_bins[edge]
        bins[minute] = bins.get(minute, 0) + 1
        return True

    def _process_entries(self, now: float) -> None:
        # Backlogged vehicles retry first (FIFO), then newly due departures.
        retry = len(self._backlog)
        for _ in range(retry):
            v = self._backlog.popleft()
            if not self._enter_edge(v, 0, now):
                self._backlog.append(v)
        while self._pending and self._pending[0].depart_s < now:
            v = self._pending.popleft()
            self.spawned += 1
            if not self._enter_edge(v, 0, now):
                self._backlog.append(v)

    def _advance_lanes(self, now: float) -> None:
        headway = self.params.service_headway_s
        for (edge, _li), lane in self.lanes.items():
            run = lane.running
            while run and run[0][0] <= now:
                _, v = run.popleft()
                v.state = VehicleState.QUEUED
                v.queue_join_s = now
                lane.queue.append(v)
            if not lane.queue or now < lane.next_service_s:
                continue
            head = lane.queue[0]
            node = self._to[edge]
            if head.next_turn is None:
                # Final edge: the vehicle leaves the network.
                lane.queue.popleft()
                head.wait_done_s += now - head.queue_join_s
                head.state = VehicleState.ARRIVED
                self.arrived += 1
                lane.next_service_s = now + headway
                continue
            if not self.movement_allowed(node, (self._approach[edge], head.next_turn)):
                continue
            nxt = head.route[head.route_pos + 1]
            if nxt in self.closed:
                continue
            turn2 = self._turn_after(head, head.route_pos + 1)
            lane2 = self._lane_for(nxt, turn2)
            target = self.lanes[(nxt, lane2)]
            if target.count() >= self._cap[nxt]:
                continue
            lane.queue.popleft()
            head.wait_done_s += now - head.queue_join_s
            head.state = VehicleState.RUNNING
            head.route_pos += 1
            head.lane = lane2
            head.next_turn = turn2
            head.stopline_at_s = now + self._ticks[nxt] * self.params.dt_s
            target.running.append((head.stopline_at_s, head))
            minute = int(now // 60.0)
            bins = self.flow_bins[nxt]
            bins[minute] = bins.get(minute, 0) + 1
            lane.next_service_s = now + headway

    # -- metrics -----------------------------------------------------------

    @property
    def active(self) -> int:
        return self.spawned - self.arrived

    def on_network(self) -> int:
        """Vehicles physically present: entry backlog plus every lane."""
        return len(self._backlog) + sum(l.count() for l in self.lanes.values())

    def lane_stats(self) -> dict[tuple[str, int], LaneStats]:
        out = {}
        v = self.params.free_speed_mps
        for key, lane in self.lanes.items():
            nr, nq = len(lane.running), len(lane.queue)
            n = nr + nq
            speed = (nr * v) / n if n else 0.0
            out[key] = LaneStats(n, nq, speed)
        return out

    def lane_counts(self, edge: str, lane: int) -> tuple[int, int]:
        l = self.lanes[(edge, lane)]
        return l.count(), len(l.queue)

    def lane_capacity(self, edge: str) -> int:
        return self._cap[edge]

    def node_waiting_s(self, node: str) -> float:
        """Accumulated waiting of vehicles currently stopped on the node's
        incoming lanes. Vehicles that crossed take their wait with them."""
        now = self.clock_s
        total = 0.0
        for eid in self.net.in_edges[node]:
            for li in range(self.net.edges[eid].lanes):
                for v in self.lanes[(eid, li)].queue:
                    total += v.wait_done_s + (now - v.queue_join_s)
        return total

    def node_halting(self, node: str) -> int:
        return sum(
            len(self.lanes[(eid, li)].queue)
            for eid in self.net.in_edges[node]
            for li in range(self.net.edges[eid].lanes)
        )

    def total_halting(self) -> int:
        return sum(len(l.queue) for l in self.lanes.values())

    def mean_speed(self) -> float:
        """Mean speed over vehicles on a lane; 0 when the network is empty."""
        nr = nq = 0
        for lane in self.lanes.values():
            nr += len(lane.running)
            nq += len(lane.queue)
        n = nr + nq
        return (nr * self.params.free_speed_mps) / n if n else 0.0


# -- demand and routing ------------------------------------------------------


def generate_demand(
    net: RoadNetwork, total_vehicles: int, horizon_s: float, seed: int
) -> list[Vehicle]:
    """Seeded trip table: uniform boundary origin/destination pairs (resampled
    while equal) and uniform integer departure times in [0, horizon_s)."""
    if total_vehicles <= 0:
        raise ValueError("total_vehicles must be positive")
    if horizon_s <= 0:
        raise ValueError("horizon_s must be positive")
    boundary = net.boundary_nodes
    if len(boundary) < 2:
        raise ValueError("need at least two boundary nodes for demand")
    rng = np.random.default_rng(seed)
    cache: dict[tuple[str, str], list[str]] = {}
    out = []
    for vid in range(total_vehicles):
        while True:
            o = boundary[int(rng.integers(len(boundary)))]
            d = boundary[int(rng.integers(len(boundary)))]
            if o != d:
                break
        depart = float(rng.integers(0, int(horizon_s)))
        key = (o, d)
        route = cache.get(key)
        if route is None:
            route = shortest_route(net, o, d, frozenset())
            cache[key] = route
        out.append(Vehicle(vid, o, d, depart, list(route)))
    return out


def shortest_route(
    net: RoadNetwork,
    frm: str,
    to: str,
    closed: frozenset[str] = frozenset(),
    banned_first: str | None = None,
) -> list[str]:
    """Cheapest edge sequence from `frm` to `to` by free-flow travel time,
    never reversing onto the edge just traversed. `banned_first` excludes
    one outgoing edge at the start (the reverse of an edge mid-traversal).
    Ties break on the lexicographically smallest edge-id tuple. Raises
    NoRouteError when `to` is unreachable."""
    if frm == to:
        raise ValueError("origin equals destination")
    if frm not in net.nodes or to not in net.nodes:
        raise ValueError(f"unknown node in route query: {frm!r} -> {to!r}")
    # Dijkstra over (node, last edge) states; carrying the path in the heap
    # entry makes equal-cost pops come out in lexicographic edge-id order.
    heap: list[tuple[float, tuple[str, ...], str, str]] = [(0.0, (), frm, "")]
    seen: set[tuple[str, str]] = set()
    while heap:
        cost, path, node, last = heapq.heappop(heap)
        if node == to:
            return list(path)
        if (node, last) in seen:
            continue
        seen.add((node, last))
        for eid in net.out_edges[node]:
            if eid in closed:
                continue
            e = net.edges[eid]
            if last:
                if e.to == net.edges[last].frm:
                    continue
            elif banned_first is not None and eid == banned_first:
                continue
            heapq.heappush(heap, (cost + e.length_m, path + (eid,), e.to, eid))
    raise NoRouteError(f"no route from {frm} to {to} with {len(closed)} closed edges")
