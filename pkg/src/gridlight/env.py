"""Multi-agent signal-control environment over the microsimulation.

Each signalized intersection is an agent. Per decision step an agent picks
one of the 8 phases; the simulator then runs `decision_interval_s` worth of
ticks. Observations are 33-dim vectors:

    [ one-hot current phase (8) | can-switch flag (1) |
      lane density, 12 incoming lanes (12) | halting density (12) ]

Lanes are ordered by approach N, E, S, W, then lane index 0..2; densities
are vehicle counts over lane capacity. The can-switch flag is 1 when the
phase has been held at least the minimum hold time and no yellow interval
is running.

The per-agent reward (default) is the drop in accumulated waiting time on
the agent's incoming lanes between consecutive decision steps, so episode
rewards telescope to W_start - W_end exactly. Alternatives: "pressure",
"queue", "speed", "waiting_total".

`global_matrix` stacks all agent observations into a (rows, cols, 33) array
by geographic position, row 0 the northmost interior row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .microsim import BlockEvent, SimParams, Simulation, Vehicle
from .roadnet import Approach, PhaseTable, RoadNetwork

OBS_DIM = 33
APPROACH_ORDER = (Approach.N, Approach.E, Approach.S, Approach.W)
REWARD_KINDS = ("waiting_diff", "pressure", "queue", "speed", "waiting_total")


def observe(sim: Simulation, node: str) -> np.ndarray:
    """33-dim observation of one signalized intersection."""
    net = sim.net
    if node not in sim.signals:
        raise ValueError(f"{node} is not a signalized node")
    sig = sim.signals[node]
    table = sim.phase_table
    obs = np.zeros(OBS_DIM, dtype=np.float64)
    obs[sig.phase] = 1.0
    can_switch = (not sig.in_yellow) and sig.time_in_phase_s >= table.min_hold_s
    obs[8] = 1.0 if can_switch else 0.0
    incoming = net.incoming_by_approach(node)
    k = 0
    for ap in APPROACH_ORDER:
        eid = incoming.get(ap)
        for li in range(3):
            if eid is not None:
                cap = sim.lane_capacity(eid)
                total, halting = sim.lane_counts(eid, li)
                obs[9 + k] = total / cap
                obs[21 + k] = halting / cap
            k += 1
    return obs


def global_matrix(net: RoadNetwork, obs_map: dict[str, np.ndarray]) -> np.ndarray:
    """Stack per-agent observations into a (rows, cols, 33) tensor laid out
    by geographic position. Every signalized node must be present."""
    r, c = net.interior_shape
    out = np.zeros((r, c, OBS_DIM), dtype=np.float64)
    for name in net.signal_nodes:
        if name not in obs_map:
            raise ValueError(f"observation for agent {name} missing")
        o = obs_map[name]
        if o.shape != (OBS_DIM,):
            raise ValueError(f"agent {name} observation has shape {o.shape}, want ({OBS_DIM},)")
        i, j = net.grid_position(name)
        out[i, j] = o
    return out


@dataclass
class StepInfo:
    clock_s: float
    total_waiting_s: float
    total_halting: int
    mean_speed_mps: float
    spawned: int
    arrived: int
    active: int


class TrafficEnv:
    """Gym-style facade: reset() then step(actions) until done.

    A fresh Simulation (cloned demand) is built on every reset, so one env
    can run many episodes. `block_events` apply inside each episode.
    """

    def __init__(
        self,
        net: RoadNetwork,
        phase_table: PhaseTable,
        demand: list[Vehicle],
        sim_params: SimParams | None = None,
        block_events: tuple[BlockEvent, ...] | list[BlockEvent] = (),
        reward: str = "waiting_diff",
        decision_interval_s: float = 5.0,
        horizon_s: float = 3600.0,
    ) -> None:
        if reward not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {reward!r}; choose from {REWARD_KINDS}")
        params = sim_params or SimParams()
        ticks = decision_interval_s / params.dt_s
        if decision_interval_s <= 0 or abs(ticks - round(ticks)) > 1e-9:
            raise ValueError("decision_interval_s must be a positive multiple of dt_s")
        if horizon_s <= 0:
            raise ValueError("horizon_s must be positive")
        self.net = net
        self.phase_table = phase_table
        self.demand = demand
        self.sim_params = params
        self.block_events = tuple(block_events)
        self.reward_kind = reward
        self.decision_interval_s = decision_interval_s
        self.horizon_s = horizon_s
        self._ticks_per_step = int(round(ticks))
        self.agents = net.signal_nodes
        self.sim: Simulation | None = None
        self._last_wait: dict[str, float] = {}

    @property
    def n_steps(self) -> int:
        """Decision steps per episode."""
        return math.ceil(self.horizon_s / self.decision_interval_s)

    def reset(self) -> tuple[dict[str, np.ndarray], np.ndarray]:
        self.sim = Simulation(
            self.net, self.phase_table, self.demand, self.sim_params, self.block_events
        )
        self._last_wait = {n: 0.0 for n in self.agents}
        obs = {n: observe(self.sim, n) for n in self.agents}
        return obs, global_matrix(self.net, obs)

    def step(
        self, actions: dict[str, int]
    ) -> tuple[dict[str, np.ndarray], dict[str, float], np.ndarray, bool, StepInfo]:
        if self.sim is None:
            raise RuntimeError("call reset() before step()")
        if set(actions) != set(self.agents):
            missing = set(self.agents) - set(actions)
            extra = set(actions) - set(self.agents)
            raise ValueError(f"actions must cover every agent (missing={sorted(missing)}, unknown={sorted(extra)})")
        sim = self.sim
        for node in self.agents:
            sim.request_phase(node, actions[node])
        for _ in range(self._ticks_per_step):
            sim.step()
        obs = {n: observe(sim, n) for n in self.agents}
        rewards = self._rewards(obs)
        done = sim.clock_s >= self.horizon_s - 1e-9
        info = StepInfo(
            clock_s=sim.clock_s,
            total_waiting_s=sum(sim.node_waiting_s(n) for n in self.agents),
            total_halting=sim.total_halting(),
            mean_speed_mps=sim.mean_speed(),
            spawned=sim.spawned,
            arrived=sim.arrived,
            active=sim.active,
        )
        return obs, rewards, global_matrix(self.net, obs), done, info

    def _rewards(self, obs: dict[str, np.ndarray]) -> dict[str, float]:
        sim = self.sim
        kind = self.reward_kind
        out: dict[str, float] = {}
        if kind == "waiting_diff" or kind == "waiting_total":
            for n in self.agents:
                w = sim.node_waiting_s(n)
                out[n] = (self._last_wait[n] - w) if kind == "waiting_diff" else -w
                self._last_wait[n] = w
        elif kind == "queue":
            for n in self.agents:
                out[n] = -float(sim.node_halting(n))
        elif kind == "pressure":
            for n in self.agents:
                out[n] = -abs(self._pressure(n))
        else:  # speed
            for n in self.agents:
                out[n] = self._incoming_speed_ratio(n)
        return out

    def _pressure(self, node: str) -> float:
        sim = self.sim
        inc = sum(
            self.sim.lane_counts(eid, li)[0]
            for eid in self.net.in_edges[node]
            for li in range(self.net.edges[eid].lanes)
        )
        outc = sum(
            sim.lane_counts(eid, li)[0]
            for eid in self.net.out_edges[node]
            for li in range(self.net.edges[eid].lanes)
        )
        return float(inc - outc)

    def _incoming_speed_ratio(self, node: str) -> float:
        """Mean speed over vehicles on incoming lanes, as a fraction of free
        speed. Empty approaches read as free flow (1.0)."""
        sim = self.sim
        stats = [
            sim.lane_counts(eid, li)
            for eid in self.net.in_edges[node]
            for li in range(self.net.edges[eid].lanes)
        ]
        total = sum(s[0] for s in stats)
        if total == 0:
            return 1.0
        halting = sum(s[1] for s in stats)
        return (total - halting) / total
