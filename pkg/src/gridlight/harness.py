"""Seeded experiment harness.

A ScenarioConfig pins everything an experiment needs: grid size, demand,
horizon, signal timing, algorithm, training length and the seed list.
Presets: "normal" (8000 vehicles/h), "peak" (10286), and "block" (normal
demand plus 4 random central-square road closures over the middle third of
the episode). Demand is fixed per seed and reused across episodes; block
edges are redrawn per (seed, episode).

`run_experiment` trains/runs one controller per seed for the configured
number of episodes and yields one record per (seed, episode) with the four
indicators: mean agent return, summed system waiting, mean queue length and
mean speed. Records serialize to a stable CSV so reruns are comparable
byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .agents import (
    ALGORITHMS,
    Controller,
    DqnConfig,
    PpoConfig,
    make_controller,
    run_episode,
)
from .env import REWARD_KINDS, TrafficEnv
from .microsim import BlockEvent, Simulation, Vehicle, generate_demand
from .roadnet import PhaseTable, RoadNetwork, build_grid, default_phase_table, node_name


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass(frozen=True)
class BlockConfig:
    """Emergency closure plan. With explicit `edges` those close in every
    episode; otherwise `n_random` distinct directed edges are drawn per
    episode from the central square of the grid. `window` defaults to the
    middle third of the horizon."""

    edges: tuple[str, ...] = ()
    n_random: int = 4
    window: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not self.edges and self.n_random <= 0:
            raise ValueError("block needs explicit edges or n_random > 0")
        if self.window is not None:
            lo, hi = self.window
            if not lo < hi:
                raise ValueError(f"empty block window [{lo}, {hi})")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    rows: int = 6
    cols: int = 6
    spacing_m: float = 200.0
    total_vehicles: int = 8000
    horizon_s: float = 3600.0
    decision_interval_s: float = 5.0
    reward: str = "waiting_diff"
    algorithm: str = "maclight"
    episodes: int = 80
    seeds: tuple[int, ...] = (42, 43, 44, 45, 46)
    fixed_period_s: float = 45.0
    yellow_s: float = 3.0
    min_hold_s: float = 10.0
    latent_dim: int = 16
    vae_lr: float = 1e-3
    ppo: PpoConfig = field(default_factory=PpoConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    block: BlockConfig | None = None

    def __post_init__(self) -> None:
        if self.rows < 3 or self.cols < 3:
            raise ValueError("rows and cols must be >= 3 (need a signalized interior)")
        if self.total_vehicles <= 0:
            raise ValueError("total_vehicles must be positive")
        if self.horizon_s <= 0 or self.decision_interval_s <= 0:
            raise ValueError("horizon_s and decision_interval_s must be positive")
        if self.reward not in REWARD_KINDS:
            raise ValueError(f"unknown reward {self.reward!r}; choose from {REWARD_KINDS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.episodes <= 0:
            raise ValueError("episodes must be positive")
        if not self.seeds:
            raise ValueError("at least one seed required")

    @property
    def steps_per_episode(self) -> int:
        return math.ceil(self.horizon_s / self.decision_interval_s)


def preset(name: str) -> ScenarioConfig:
    if name == "normal":
        return ScenarioConfig(name="normal")
    if name == "peak":
        return ScenarioConfig(name="peak", total_vehicles=10286)
    if name == "block":
        return ScenarioConfig(name="block", block=BlockConfig())
    raise ConfigError(f"unknown preset {name!r}; choose from ('normal', 'peak', 'block')")


# -- config files -------------------------------------------------------------


def _build_dataclass(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a table/object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a table/object, got {type(doc).__name__}")
    d = dict(doc)
    if "seeds" in d:
        d["seeds"] = tuple(d["seeds"])
    if "ppo" in d:
        d["ppo"] = _build_dataclass(PpoConfig, d["ppo"], "ppo")
    if "dqn" in d:
        d["dqn"] = _build_dataclass(DqnConfig, d["dqn"], "dqn")
    if "block" in d and d["block"] is not None:
        b = dict(d["block"])
        if "edges" in b:
            b["edges"] = tuple(b["edges"])
        if "window" in b and b["window"] is not None:
            b["window"] = tuple(b["window"])
        d["block"] = _build_dataclass(BlockConfig, b, "block")
    return _build_dataclass(ScenarioConfig, d, "config")


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    suffix = p.suffix.lower()
    if suffix == ".json":
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    elif suffix == ".toml":
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: invalid TOML: {e}") from e
    else:
        raise ConfigError(f"{p}: unsupported config format {suffix!r} (use .json or .toml)")
    return config_from_dict(doc)


# -- scenario assembly ---------------------------------------------------------


def central_square_edges(net: RoadNetwork) -> tuple[str, ...]:
    """The 8 directed edges among the four nodes around the grid center."""
    r0 = net.rows // 2 - 1
    c0 = net.cols // 2 - 1
    names = {node_name(r, c) for r in (r0, r0 + 1) for c in (c0, c0 + 1)}
    return tuple(sorted(
        eid for eid, e in net.edges.items() if e.frm in names and e.to in names
    ))


def block_events_for(
    cfg: ScenarioConfig, net: RoadNetwork, seed: int, episode: int
) -> tuple[BlockEvent, ...]:
    if cfg.block is None:
        return ()
    b = cfg.block
    window = b.window or (cfg.horizon_s / 3.0, 2.0 * cfg.horizon_s / 3.0)
    if b.edges:
        for eid in b.edges:
            if eid not in net.edges:
                raise ConfigError(f"block edge {eid!r} not in the network")
        return (BlockEvent(tuple(b.edges), window[0], window[1]),)
    candidates = central_square_edges(net)
    if b.n_random > len(candidates):
        raise ConfigError(
            f"cannot draw {b.n_random} block edges from {len(candidates)} central candidates"
        )
    rng = np.random.default_rng([seed, episode, 7])
    picked = rng.choice(len(candidates), size=b.n_random, replace=False)
    return (BlockEvent(tuple(candidates[i] for i in sorted(picked)), window[0], window[1]),)


def build_network(cfg: ScenarioConfig) -> tuple[RoadNetwork, PhaseTable]:
    net = build_grid(cfg.rows, cfg.cols, cfg.spacing_m)
    return net, default_phase_table(cfg.yellow_s, cfg.min_hold_s)


def build_env(
    cfg: ScenarioConfig,
    net: RoadNetwork,
    table: PhaseTable,
    demand: list[Vehicle],
    seed: int,
    episode: int,
) -> TrafficEnv:
    return TrafficEnv(
        net, table, demand,
        block_events=block_events_for(cfg, net, seed, episode),
        reward=cfg.reward,
        decision_interval_s=cfg.decision_interval_s,
        horizon_s=cfg.horizon_s,
    )


def _controller_for(cfg: ScenarioConfig, net: RoadNetwork, table: PhaseTable, seed: int) -> Controller:
    return make_controller(
        cfg.algorithm,
        net.signal_nodes,
        seed=seed,
        n_actions=table.n_phases,
        grid_shape=net.interior_shape,
        ppo=cfg.ppo,
        dqn=cfg.dqn,
        fixed_period_s=cfg.fixed_period_s,
        vae_lr=cfg.vae_lr,
        latent_dim=cfg.latent_dim,
        total_steps=cfg.episodes * cfg.steps_per_episode,
    )


# -- experiment loop -----------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    seed: int
    episode: int
    ret: float
    wait: float
    queue: float
    speed: float


CSV_HEADER = "seed,episode,return,wait,queue,speed"


def write_records_csv(path, records: list[RunRecord]) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.seed},{r.episode},{r.ret:.6f},{r.wait:.6f},{r.queue:.6f},{r.speed:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path) -> list[RunRecord]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a records CSV (header {text[0] if text else '<empty>'!r})")
    out = []
    for line in text[1:]:
        seed, ep, ret, wait, queue, speed = line.split(",")
        out.append(RunRecord(int(seed), int(ep), float(ret), float(wait), float(queue), float(speed)))
    return out


def run_experiment(
    cfg: ScenarioConfig,
    out_dir=None,
    log=None,
) -> tuple[list[RunRecord], dict[int, Controller]]:
    """Train/run per the config: one persistent controller per seed,
    `cfg.episodes` episodes each, a fresh environment per episode. Returns
    the records plus the per-seed controllers for checkpointing."""
    net, table = build_network(cfg)
    records: list[RunRecord] = []
    controllers: dict[int, Controller] = {}
    for seed in cfg.seeds:
        demand = generate_demand(net, cfg.total_vehicles, cfg.horizon_s, seed)
        controller = _controller_for(cfg, net, table, seed)
        controllers[seed] = controller
        for ep in range(cfg.episodes):
            env = build_env(cfg, net, table, demand, seed, ep)
            res = run_episode(env, controller)
            records.append(
                RunRecord(seed, ep, res.mean_return, res.wait_s, res.queue_mean, res.speed_mean)
            )
            if log:
                log(
                    f"[{cfg.name}/{cfg.algorithm}] seed {seed} episode {ep}: "
                    f"return {res.mean_return:.2f} wait {res.wait_s:.0f} "
                    f"queue {res.queue_mean:.1f} speed {res.speed_mean:.2f}"
                )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records_csv(out / "records.csv", records)
        for seed, controller in controllers.items():
            if controller.named_parameters():
                controller.save(out / f"checkpoint_seed{seed}.json")
    return records, controllers


def evaluate(
    cfg: ScenarioConfig, checkpoint_path=None, controller: Controller | None = None
) -> tuple[list[RunRecord], float]:
    """Greedy evaluation: one episode per seed, no learning, no sampling.
    The outcome depends only on the checkpoint and the seeds."""
    net, table = build_network(cfg)
    if controller is None:
        controller = _controller_for(cfg, net, table, cfg.seeds[0])
        if checkpoint_path is not None:
            controller.load(checkpoint_path)
    controller.train_mode = False
    records = []
    for seed in cfg.seeds:
        demand = generate_demand(net, cfg.total_vehicles, cfg.horizon_s, seed)
        env = build_env(cfg, net, table, demand, seed, 0)
        res = run_episode(env, controller)
        records.append(
            RunRecord(seed, 0, res.mean_return, res.wait_s, res.queue_mean, res.speed_mean)
        )
    controller.train_mode = True
    mean_return = float(np.mean([r.ret for r in records]))
    return records, mean_return


# -- flow census ----------------------------------------------------------------


@dataclass
class FlowCensus:
    """Per-edge vehicle entries binned by minute of entry."""

    horizon_s: float
    bin_s: float
    flows: dict[str, np.ndarray]

    def total(self, edge: str) -> int:
        return int(self.flows[edge].sum())

    def signed(self, edge: str) -> np.ndarray:
        """Net flow along the road both directions share: positive along the
        lexicographically smaller edge id, negative along the reverse."""
        rev = edge[len(edge) // 2 :] + edge[: len(edge) // 2]
        fwd, bwd = (edge, rev) if edge <= rev else (rev, edge)
        out = self.flows[fwd].astype(np.int64).copy()
        if bwd in self.flows:
            out -= self.flows[bwd]
        return out


@dataclass
class CensusPair:
    baseline: FlowCensus
    blocked: FlowCensus
    window: tuple[float, float]
    blocked_edges: tuple[str, ...]


def _census_from_sim(sim: Simulation, horizon_s: float, bin_s: float = 60.0) -> FlowCensus:
    n_bins = math.ceil(horizon_s / bin_s)
    flows = {}
    for eid, bins in sim.flow_bins.items():
        arr = np.zeros(n_bins, dtype=np.int64)
        for minute, count in bins.items():
            if 0 <= minute < n_bins:
                arr[minute] = count
        flows[eid] = arr
    return FlowCensus(horizon_s, bin_s, flows)


def _drive_fixed(env: TrafficEnv, period_s: float) -> Simulation:
    from .agents import FixedTimeController

    controller = FixedTimeController(env.agents, period_s, env.phase_table.n_phases)
    obs, matrix = env.reset()
    done = False
    while not done:
        actions = controller.act(obs, matrix, env.sim.clock_s)
        obs, _, matrix, done, _ = env.step(actions)
    return env.sim


def flow_census(cfg: ScenarioConfig, seed: int | None = None) -> CensusPair:
    """Run the scenario twice under fixed-time control with identical
    demand, with and without the configured block, and census both."""
    if cfg.block is None:
        raise ConfigError("flow_census needs a config with a block section")
    seed = cfg.seeds[0] if seed is None else seed
    net, table = build_network(cfg)
    demand = generate_demand(net, cfg.total_vehicles, cfg.horizon_s, seed)
    events = block_events_for(cfg, net, seed, 0)
    base_cfg = dataclasses.replace(cfg, block=None)
    env_base = build_env(base_cfg, net, table, demand, seed, 0)
    env_block = TrafficEnv(
        net, table, demand,
        block_events=events,
        reward=cfg.reward,
        decision_interval_s=cfg.decision_interval_s,
        horizon_s=cfg.horizon_s,
    )
    base = _census_from_sim(_drive_fixed(env_base, cfg.fixed_period_s), cfg.horizon_s)
    blocked = _census_from_sim(_drive_fixed(env_block, cfg.fixed_period_s), cfg.horizon_s)
    ev = events[0]
    return CensusPair(base, blocked, (ev.start_s, ev.end_s), ev.edges)


def write_census_csv(census: FlowCensus, path) -> None:
    lines = ["edge,minute,count"]
    for eid in sorted(census.flows):
        for minute, count in enumerate(census.flows[eid]):
            lines.append(f"{eid},{minute},{int(count)}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- report plots ----------------------------------------------------------------


def emit_plots(records: list[RunRecord], out_dir) -> list[str]:
    """One SVG per indicator: per-episode mean across seeds plus a min-max
    band. Returns the paths written."""
    from .plots import svg_line_chart

    if not records:
        raise ValueError("no records to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = sorted({r.seed for r in records})
    episodes = sorted({r.episode for r in records})
    ep_index = {e: i for i, e in enumerate(episodes)}
    seed_index = {s: i for i, s in enumerate(seeds)}
    grids = {
        name: np.full((len(seeds), len(episodes)), np.nan)
        for name in ("return", "wait", "queue", "speed")
    }
    for r in records:
        i, j = seed_index[r.seed], ep_index[r.episode]
        grids["return"][i, j] = r.ret
        grids["wait"][i, j] = r.wait
        grids["queue"][i, j] = r.queue
        grids["speed"][i, j] = r.speed
    labels = {
        "return": "mean agent return",
        "wait": "summed waiting time (s)",
        "queue": "mean queue length (vehicles)",
        "speed": "mean speed (m/s)",
    }
    paths = []
    x = np.array(episodes, dtype=np.float64)
    for name, grid in grids.items():
        if np.isnan(grid).any():
            raise ValueError("records do not form a full seed x episode grid")
        mean = grid.mean(axis=0)
        paths.append(
            svg_line_chart(
                out / f"{name}.svg",
                x,
                [(f"mean of {len(seeds)} seed(s)", mean)],
                band=(grid.min(axis=0), grid.max(axis=0)),
                title=labels[name],
                xlabel="episode",
                ylabel=name,
            )
        )
    return paths


def plot_census(pair: CensusPair, out_dir, edges: tuple[str, ...] | None = None) -> list[str]:
    """Per-edge entry-flow comparison, baseline vs blocked, with dashed
    markers at the block window boundaries."""
    from .plots import svg_line_chart

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges = edges or pair.blocked_edges
    n_bins = len(next(iter(pair.baseline.flows.values())))
    x = np.arange(n_bins, dtype=np.float64)
    vlines = (pair.window[0] / pair.baseline.bin_s, pair.window[1] / pair.baseline.bin_s)
    paths = []
    for eid in edges:
        paths.append(
            svg_line_chart(
                out / f"flow_{eid}.svg",
                x,
                [
                    ("baseline", pair.baseline.flows[eid].astype(float)),
                    ("with block", pair.blocked.flows[eid].astype(float)),
                ],
                vlines=vlines,
                title=f"entries per minute on {eid}",
                xlabel="minute",
                ylabel="vehicles",
            )
        )
    return paths
