"""Multi-agent traffic-signal control on a simulated road grid.

Layers, bottom up: `roadnet` (lattice networks, movement conflicts, the
8-phase table), `microsim` (deterministic point-queue traffic flow, demand,
routing, road blocks), `env` (per-intersection POMDP facade), `autodiff`
(numpy reverse-mode tensors, layers, Adam), `vae` (conv VAE over the global
observation matrix), `agents` (PPO/DQN controllers), `harness` (seeded
experiments, records, census, plots) and `cli`.
"""

from .roadnet import (
    Approach,
    Turn,
    Movement,
    PhaseTable,
    RoadNetwork,
    build_grid,
    conflicting,
    default_phase_table,
)
from .microsim import (
    BlockEvent,
    NoRouteError,
    SimParams,
    Simulation,
    Vehicle,
    generate_demand,
    shortest_route,
)
from .env import TrafficEnv, global_matrix, observe
from .autodiff import Tensor, Adam, no_grad
from .vae import ConvVae, vae_loss, reparameterize
from .agents import (
    DqnConfig,
    PpoConfig,
    Trajectory,
    gae_advantages,
    make_controller,
    ppo_update,
    run_episode,
    td_deltas,
)
from .harness import (
    BlockConfig,
    ConfigError,
    RunRecord,
    ScenarioConfig,
    evaluate,
    flow_census,
    load_config,
    preset,
    run_experiment,
)

__version__ = "0.1.0"
