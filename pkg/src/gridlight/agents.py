"""Signal-control agents: PPO machinery, DQN baseline, and controllers.

Each intersection learns independently with PPO from its own 33-dim
observation. The controllers differ only in what the critic sees:

  - "fixed":    no learning, round-robin phase schedule keyed to the clock
  - "ippo":     critic input = own observation (33)
  - "maclight": critic input = [VAE latent of the global matrix, own obs]
                (16 + 33); the VAE trains online one step per decision step
  - "mappo":    one shared critic over all observations concatenated
                (agents x 33), trained on the mean agent reward
  - "idqn":     independent Q-learning with replay and a target net

Updates are episode-batch: the whole trajectory is collected, then the
clipped objective runs for a fixed number of epochs. Log-probs and the
one-step value targets r + gamma * V_old(s') are recorded once and frozen;
advantages come from generalized advantage estimation and are normalized
per trajectory. Terminal steps bootstrap with V = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Linear, Tensor, load_checkpoint, save_checkpoint
from .vae import ConvVae


class DivergenceError(RuntimeError):
    """A loss became non-finite during an update."""


@dataclass(frozen=True)
class PpoConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    clip_eps: float = 0.2
    entropy_coef: float = 0.0
    hidden_dim: int = 66

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")


@dataclass(frozen=True)
class DqnConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    buffer_size: int = 50_000
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_frac: float = 0.3
    sync_every: int = 500
    hidden_dim: int = 66


class Mlp:
    """Two ReLU hidden layers, linear head."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.head = Linear(hidden, out_dim, rng, init="xavier")

    def __call__(self, x) -> Tensor:
        return self.head(self.fc2(self.fc1(x).relu()).relu())

    def parameters(self) -> list[Tensor]:
        return [self.fc1.W, self.fc1.b, self.fc2.W, self.fc2.b, self.head.W, self.head.b]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.fc1.w": self.fc1.W, f"{prefix}.fc1.b": self.fc1.b,
            f"{prefix}.fc2.w": self.fc2.W, f"{prefix}.fc2.b": self.fc2.b,
            f"{prefix}.head.w": self.head.W, f"{prefix}.head.b": self.head.b,
        }

    def copy_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst.data[...] = src.data


class PolicyNet(Mlp):
    """Maps an observation batch to action logits."""


class ValueNet(Mlp):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__(in_dim, hidden, 1, rng)

    def value(self, x: np.ndarray) -> float:
        """Scalar state value of a single input, no graph."""
        with ad.no_grad():
            return float(self(Tensor(np.atleast_2d(x))).data[0, 0])


# -- advantage estimation ------------------------------------------------------


def td_deltas(rewards: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    """One-step TD residuals r_t + gamma*V(s_{t+1}) - V(s_t); `values` has
    one more entry than `rewards` (the bootstrap)."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (r.shape[0] + 1,):
        raise ValueError(f"values must have length len(rewards)+1, got {v.shape} vs {r.shape}")
    return r + gamma * v[1:] - v[:-1]


def gae_advantages(deltas: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Backward recursion A_t = delta_t + gamma*lam*A_{t+1}."""
    d = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(d)
    acc = 0.0
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + gamma * lam * acc
        out[t] = acc
    return out


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


# -- action selection ----------------------------------------------------------


def action_probs(policy: PolicyNet, obs: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logits = policy(Tensor(np.atleast_2d(obs))).data[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def sample_action(policy: PolicyNet, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    p = action_probs(policy, obs)
    a = int(rng.choice(len(p), p=p))
    return a, float(np.log(p[a]))


def greedy_action(policy: PolicyNet, obs: np.ndarray) -> int:
    p = action_probs(policy, obs)
    return int(np.argmax(p))


# -- PPO update ----------------------------------------------------------------


@dataclass
class Trajectory:
    """One agent's episode. `values` carries T+1 entries, bootstrap last;
    `value_inputs` are whatever the critic consumes (may differ from obs)."""

    obs: np.ndarray
    value_inputs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = len(self.rewards)
        if not (len(self.obs) == len(self.value_inputs) == len(self.actions) == len(self.logp_old) == t):
            raise ValueError("trajectory field lengths disagree")
        if len(self.values) != t + 1:
            raise ValueError(f"values must have length T+1={t + 1}, got {len(self.values)}")


def clipped_surrogate(
    policy: PolicyNet,
    obs: np.ndarray,
    actions: np.ndarray,
    logp_old: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
    entropy_coef: float = 0.0,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Negated clipped objective (a loss to minimize).

    Returns (loss, logits, ratios) so tests can inspect per-sample logits
    gradients and the probability ratios."""
    logits = policy(Tensor(obs))
    logp = ad.log_softmax(logits, axis=1)
    onehot = np.eye(logits.shape[1])[np.asarray(actions, dtype=int)]
    lp_taken = (logp * Tensor(onehot)).sum(axis=1)
    ratio = (lp_taken - Tensor(logp_old)).exp()
    adv_t = Tensor(adv)
    plain = ratio * adv_t
    clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv_t
    objective = ad.minimum(plain, clipped).mean()
    if entropy_coef:
        neg_entropy = (logp.exp() * logp).sum(axis=1).mean()
        objective = objective - entropy_coef * neg_entropy
    return -objective, logits, ratio.data.copy()


def ppo_update(
    traj: Trajectory,
    policy: PolicyNet,
    value: ValueNet,
    actor_opt: Adam,
    critic_opt: Adam,
    cfg: PpoConfig,
) -> dict[str, float]:
    """Episode-batch PPO: E epochs of the clipped objective plus a squared
    error critic step against the frozen one-step target."""
    t = len(traj.rewards)
    deltas = td_deltas(traj.rewards, traj.values, cfg.gamma)
    adv = normalize_advantages(gae_advantages(deltas, cfg.gamma, cfg.gae_lambda))
    v_target = traj.rewards + cfg.gamma * traj.values[1:]
    v_target_t = Tensor(v_target.reshape(t, 1))
    stats: dict[str, float] = {}
    for epoch in range(cfg.epochs):
        loss, _, ratio = clipped_surrogate(
            policy, traj.obs, traj.actions, traj.logp_old, adv, cfg.clip_eps, cfg.entropy_coef
        )
        if not np.isfinite(loss.data):
            raise DivergenceError(
                f"actor loss non-finite at epoch {epoch}: {float(loss.data)}, "
                f"ratio range [{ratio.min()}, {ratio.max()}]"
            )
        actor_opt.zero_grad()
        loss.backward()
        actor_opt.step()
        err = value(Tensor(traj.value_inputs)) - v_target_t
        v_loss = (err * err).mean()
        if not np.isfinite(v_loss.data):
            raise DivergenceError(f"critic loss non-finite at epoch {epoch}: {float(v_loss.data)}")
        critic_opt.zero_grad()
        v_loss.backward()
        critic_opt.step()
        if epoch == 0:
            stats["actor_loss_first"] = loss.item()
            stats["critic_loss_first"] = v_loss.item()
        stats["actor_loss"] = loss.item()
        stats["critic_loss"] = v_loss.item()
        stats["ratio_max"] = float(ratio.max())
    return stats


# -- DQN -----------------------------------------------------------------------


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self._n = 0
        self._i = 0

    def push(self, obs, action, reward, next_obs, done) -> None:
        i = self._i
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self._i = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def __len__(self) -> int:
        return self._n

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self._n, size=batch_size)
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.done[idx])


def dqn_update(
    qnet: Mlp, target: Mlp, buffer: ReplayBuffer, opt: Adam,
    cfg: DqnConfig, rng: np.random.Generator,
) -> float | None:
    """One squared-TD-error step from a replay sample. No-op (returns None)
    until the buffer holds a full batch. Terminal transitions use the bare
    reward as target."""
    if len(buffer) < cfg.batch_size:
        return None
    obs, actions, rewards, next_obs, done = buffer.sample(cfg.batch_size, rng)
    with ad.no_grad():
        q_next = target(Tensor(next_obs)).data.max(axis=1)
    y = rewards + cfg.gamma * (1.0 - done) * q_next
    q = qnet(Tensor(obs))
    onehot = np.eye(q.shape[1])[actions]
    q_taken = (q * Tensor(onehot)).sum(axis=1)
    err = q_taken - Tensor(y)
    loss = (err * err).mean()
    if not np.isfinite(loss.data):
        raise DivergenceError(f"DQN loss non-finite: {float(loss.data)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


# -- controllers ---------------------------------------------------------------


class Controller:
    """Episode driver interface. Training controllers sample actions and
    learn; with train_mode False they act greedily and never update."""

    trainable = False

    def __init__(self, agents: tuple[str, ...]):
        self.agents = tuple(agents)
        self.train_mode = True

    def begin_episode(self, obs, matrix) -> None:
        pass

    def act(self, obs, matrix, clock_s: float) -> dict[str, int]:
        raise NotImplementedError

    def observe(self, obs, matrix, actions, rewards, next_obs, next_matrix, done: bool) -> None:
        pass

    def end_episode(self) -> dict[str, float]:
        return {}

    def named_parameters(self) -> dict[str, Tensor]:
        return {}

    def save(self, path) -> None:
        save_checkpoint(path, self.named_parameters())

    def load(self, path) -> None:
        load_checkpoint(path, self.named_parameters())


class FixedTimeController(Controller):
    """Round-robin schedule keyed to the global clock: phase k for
    clock in [k*period, (k+1)*period), looping over all phases. Requests
    therefore land exactly on period boundaries."""

    def __init__(self, agents, period_s: float = 45.0, n_actions: int = 8):
        super().__init__(agents)
        if period_s <= 0:
            raise ValueError("period_s must be positive")
        self.period_s = period_s
        self.n_actions = n_actions

    def action_at(self, clock_s: float) -> int:
        return int(clock_s // self.period_s) % self.n_actions

    def act(self, obs, matrix, clock_s: float) -> dict[str, int]:
        a = self.action_at(clock_s)
        return {n: a for n in self.agents}


class _PpoMember:
    """Nets, optimizers and episode storage for one PPO agent."""

    def __init__(self, obs_dim: int, critic_dim: int, n_actions: int,
                 cfg: PpoConfig, rng: np.random.Generator, own_critic: bool = True):
        self.policy = PolicyNet(obs_dim, cfg.hidden_dim, n_actions, rng)
        self.actor_opt = Adam(self.policy.parameters(), cfg.actor_lr)
        self.value = ValueNet(critic_dim, cfg.hidden_dim, rng) if own_critic else None
        self.critic_opt = Adam(self.value.parameters(), cfg.critic_lr) if own_critic else None
        self.reset_storage()

    def reset_storage(self) -> None:
        self.obs: list[np.ndarray] = []
        self.value_inputs: list[np.ndarray] = []
        self.actions: list[int] = []
        self.logp: list[float] = []
        self.rewards: list[float] = []
        self.values: list[float] = []

    def trajectory(self) -> Trajectory:
        return Trajectory(
            obs=np.array(self.obs),
            value_inputs=np.array(self.value_inputs),
            actions=np.array(self.actions, dtype=np.int64),
            logp_old=np.array(self.logp),
            rewards=np.array(self.rewards),
            values=np.array(self.values + [0.0]),  # terminal bootstrap
        )


class IppoController(Controller):
    """Fully independent PPO: each agent's critic sees only its own obs."""

    trainable = True
    algo = "ippo"

    def __init__(self, agents, cfg: PpoConfig | None = None, seed: int = 0,
                 obs_dim: int = 33, n_actions: int = 8):
        super().__init__(agents)
        self.cfg = cfg or PpoConfig()
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        init_rng = np.random.default_rng([seed, 101])
        self.act_rng = np.random.default_rng([seed, 102])
        self.members = {
            n: _PpoMember(obs_dim, self._critic_dim(), n_actions, self.cfg, init_rng)
            for n in self.agents
        }

    def _critic_dim(self) -> int:
        return self.obs_dim

    def _value_input(self, node: str, obs, matrix) -> np.ndarray:
        return obs[node]

    def begin_episode(self, obs, matrix) -> None:
        for m in self.members.values():
            m.reset_storage()

    def act(self, obs, matrix, clock_s: float) -> dict[str, int]:
        self._prepare_step(obs, matrix)
        actions = {}
        for n in self.agents:
            m = self.members[n]
            if self.train_mode:
                a, logp = sample_action(m.policy, obs[n], self.act_rng)
                sf = self._value_input(n, obs, matrix)
                m.obs.append(obs[n])
                m.value_inputs.append(sf)
                m.actions.append(a)
                m.logp.append(logp)
                m.values.append(m.value.value(sf))
            else:
                a = greedy_action(m.policy, obs[n])
            actions[n] = a
        return actions

    def _prepare_step(self, obs, matrix) -> None:
        pass

    def observe(self, obs, matrix, actions, rewards, next_obs, next_matrix, done) -> None:
        if not self.train_mode:
            return
        for n in self.agents:
            self.members[n].rewards.append(rewards[n])

    def end_episode(self) -> dict[str, float]:
        if not self.train_mode or not next(iter(self.members.values())).rewards:
            return {}
        stats: dict[str, float] = {}
        losses = []
        for n in self.agents:
            m = self.members[n]
            s = ppo_update(m.trajectory(), m.policy, m.value, m.actor_opt, m.critic_opt, self.cfg)
            losses.append(s["actor_loss"])
            m.reset_storage()
        stats["actor_loss_mean"] = float(np.mean(losses))
        return stats

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for n, m in self.members.items():
            out.update(m.policy.named_parameters(f"agent.{n}.policy"))
            if m.value is not None:
                out.update(m.value.named_parameters(f"agent.{n}.value"))
        return out


class LatentCriticController(IppoController):
    """Independent PPO actors whose critics also see a learned latent
    summary of the global observation matrix. The summary is the posterior
    mean of an online-trained conv VAE; it reaches the critic as a detached
    constant, so no gradient flows back into the VAE from the agents."""

    algo = "maclight"

    def __init__(self, agents, cfg: PpoConfig | None = None, seed: int = 0,
                 obs_dim: int = 33, n_actions: int = 8,
                 grid_shape: tuple[int, int] = (4, 4), latent_dim: int = 16,
                 vae_lr: float = 1e-3):
        self.latent_dim = latent_dim
        self._grid_shape = grid_shape
        super().__init__(agents, cfg, seed, obs_dim, n_actions)
        self.vae = ConvVae(grid_shape, obs_dim, latent_dim, lr=vae_lr, seed=seed)
        self.vae_rng = np.random.default_rng([seed, 103])
        self._latent = np.zeros(latent_dim)
        self._vae_losses: list[float] = []

    def _critic_dim(self) -> int:
        return self.latent_dim + self.obs_dim

    def _value_input(self, node: str, obs, matrix) -> np.ndarray:
        return np.concatenate([self._latent, obs[node]])

    def begin_episode(self, obs, matrix) -> None:
        super().begin_episode(obs, matrix)
        self._vae_losses = []

    def _prepare_step(self, obs, matrix) -> None:
        if self.train_mode:
            self._latent, record = self.vae.train_step(matrix, self.vae_rng)
            self._vae_losses.append(record.total)
        else:
            self._latent = self.vae.posterior_mean(matrix)

    def end_episode(self) -> dict[str, float]:
        stats = super().end_episode()
        if self._vae_losses:
            stats["vae_loss_mean"] = float(np.mean(self._vae_losses))
        return stats

    def named_parameters(self) -> dict[str, Tensor]:
        out = super().named_parameters()
        for name, t in self.vae.named_parameters().items():
            out[f"vae.{name}"] = t
        return out


class MappoController(IppoController):
    """Shared-critic PPO: one central value net over the concatenation of
    every agent's observation, trained on the mean agent reward; all actors
    reuse its advantages."""

    algo = "mappo"

    def __init__(self, agents, cfg: PpoConfig | None = None, seed: int = 0,
                 obs_dim: int = 33, n_actions: int = 8):
        super().__init__(agents, cfg, seed, obs_dim, n_actions)
        rng = np.random.default_rng([seed, 104])
        self.central_value = ValueNet(obs_dim * len(self.agents), self.cfg.hidden_dim, rng)
        self.central_opt = Adam(self.central_value.parameters(), self.cfg.critic_lr)
        self._joint: list[np.ndarray] = []
        self._joint_values: list[float] = []
        self._mean_rewards: list[float] = []

    def _critic_dim(self) -> int:
        return self.obs_dim  # per-member critics unused; see central_value

    def begin_episode(self, obs, matrix) -> None:
        super().begin_episode(obs, matrix)
        self._joint = []
        self._joint_values = []
        self._mean_rewards = []

    def _joint_obs(self, obs) -> np.ndarray:
        return np.concatenate([obs[n] for n in self.agents])

    def act(self, obs, matrix, clock_s: float) -> dict[str, int]:
        actions = {}
        if self.train_mode:
            joint = self._joint_obs(obs)
            self._joint.append(joint)
            self._joint_values.append(self.central_value.value(joint))
        for n in self.agents:
            m = self.members[n]
            if self.train_mode:
                a, logp = sample_action(m.policy, obs[n], self.act_rng)
                m.obs.append(obs[n])
                m.actions.append(a)
                m.logp.append(logp)
            else:
                a = greedy_action(m.policy, obs[n])
            actions[n] = a
        return actions

    def observe(self, obs, matrix, actions, rewards, next_obs, next_matrix, done) -> None:
        if not self.train_mode:
            return
        super().observe(obs, matrix, actions, rewards, next_obs, next_matrix, done)
        self._mean_rewards.append(float(np.mean([rewards[n] for n in self.agents])))

    def end_episode(self) -> dict[str, float]:
        if not self.train_mode or not self._mean_rewards:
            return {}
        cfg = self.cfg
        t = len(self._mean_rewards)
        rewards = np.array(self._mean_rewards)
        values = np.array(self._joint_values + [0.0])
        adv = normalize_advantages(
            gae_advantages(td_deltas(rewards, values, cfg.gamma), cfg.gamma, cfg.gae_lambda)
        )
        v_target = Tensor((rewards + cfg.gamma * values[1:]).reshape(t, 1))
        joint = np.array(self._joint)
        losses = []
        for epoch in range(cfg.epochs):
            for n in self.agents:
                m = self.members[n]
                loss, _, _ = clipped_surrogate(
                    m.policy, np.array(m.obs), np.array(m.actions, dtype=np.int64),
                    np.array(m.logp), adv, cfg.clip_eps, cfg.entropy_coef,
                )
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"MAPPO actor loss non-finite at epoch {epoch}")
                m.actor_opt.zero_grad()
                loss.backward()
                m.actor_opt.step()
                if epoch == cfg.epochs - 1:
                    losses.append(loss.item())
            err = self.central_value(Tensor(joint)) - v_target
            v_loss = (err * err).mean()
            if not np.isfinite(v_loss.data):
                raise DivergenceError(f"MAPPO critic loss non-finite at epoch {epoch}")
            self.central_opt.zero_grad()
            v_loss.backward()
            self.central_opt.step()
        for m in self.members.values():
            m.reset_storage()
        return {"actor_loss_mean": float(np.mean(losses))}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for n, m in self.members.items():
            out.update(m.policy.named_parameters(f"agent.{n}.policy"))
        out.update(self.central_value.named_parameters("central.value"))
        return out


class IdqnController(Controller):
    """Independent DQN per intersection with a shared epsilon schedule."""

    trainable = True
    algo = "idqn"

    def __init__(self, agents, cfg: DqnConfig | None = None, seed: int = 0,
                 obs_dim: int = 33, n_actions: int = 8, total_steps: int = 57_600):
        super().__init__(agents)
        self.cfg = cfg or DqnConfig()
        self.n_actions = n_actions
        self.total_steps = max(1, total_steps)
        init_rng = np.random.default_rng([seed, 105])
        self.rng = np.random.default_rng([seed, 106])
        c = self.cfg
        self.qnets = {n: Mlp(obs_dim, c.hidden_dim, n_actions, init_rng) for n in self.agents}
        self.targets = {n: Mlp(obs_dim, c.hidden_dim, n_actions, init_rng) for n in self.agents}
        for n in self.agents:
            self.targets[n].copy_from(self.qnets[n])
        self.opts = {n: Adam(self.qnets[n].parameters(), c.lr) for n in self.agents}
        self.buffers = {n: ReplayBuffer(c.buffer_size, obs_dim) for n in self.agents}
        self.step_count = 0
        self.update_count = {n: 0 for n in self.agents}

    def epsilon(self) -> float:
        c = self.cfg
        anneal = c.anneal_frac * self.total_steps
        frac = min(1.0, self.step_count / anneal) if anneal > 0 else 1.0
        return c.eps_start + (c.eps_end - c.eps_start) * frac

    def act(self, obs, matrix, clock_s: float) -> dict[str, int]:
        eps = self.epsilon() if self.train_mode else 0.0
        actions = {}
        for n in self.agents:
            if self.train_mode and self.rng.random() < eps:
                actions[n] = int(self.rng.integers(self.n_actions))
            else:
                with ad.no_grad():
                    q = self.qnets[n](Tensor(np.atleast_2d(obs[n]))).data[0]
                actions[n] = int(np.argmax(q))
        return actions

    def observe(self, obs, matrix, actions, rewards, next_obs, next_matrix, done) -> None:
        if not self.train_mode:
            return
        self.step_count += 1
        c = self.cfg
        for n in self.agents:
            self.buffers[n].push(obs[n], actions[n], rewards[n], next_obs[n], done)
            loss = dqn_update(self.qnets[n], self.targets[n], self.buffers[n],
                              self.opts[n], c, self.rng)
            if loss is not None:
                self.update_count[n] += 1
                if self.update_count[n] % c.sync_every == 0:
                    self.targets[n].copy_from(self.qnets[n])

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for n in self.agents:
            out.update(self.qnets[n].named_parameters(f"agent.{n}.q"))
        return out


ALGORITHMS = ("fixed", "ippo", "maclight", "mappo", "idqn")


def make_controller(
    algo: str,
    agents: tuple[str, ...],
    seed: int = 0,
    obs_dim: int = 33,
    n_actions: int = 8,
    grid_shape: tuple[int, int] = (4, 4),
    ppo: PpoConfig | None = None,
    dqn: DqnConfig | None = None,
    fixed_period_s: float = 45.0,
    vae_lr: float = 1e-3,
    latent_dim: int = 16,
    total_steps: int = 57_600,
) -> Controller:
    if algo == "fixed":
        return FixedTimeController(agents, fixed_period_s, n_actions)
    if algo == "ippo":
        return IppoController(agents, ppo, seed, obs_dim, n_actions)
    if algo == "maclight":
        return LatentCriticController(
            agents, ppo, seed, obs_dim, n_actions, grid_shape, latent_dim, vae_lr
        )
    if algo == "mappo":
        return MappoController(agents, ppo, seed, obs_dim, n_actions)
    if algo == "idqn":
        return IdqnController(agents, dqn, seed, obs_dim, n_actions, total_steps)
    raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")


@dataclass
class EpisodeResult:
    mean_return: float
    returns: dict[str, float]
    wait_s: float
    queue_mean: float
    speed_mean: float
    steps: int
    losses: dict[str, float] = field(default_factory=dict)


def run_episode(env, controller: Controller) -> EpisodeResult:
    """Drive one full episode; the controller learns iff its train_mode is
    set. Indicators: wait sums the system waiting over decision steps,
    queue and speed average over decision steps."""
    obs, matrix = env.reset()
    controller.begin_episode(obs, matrix)
    returns = {n: 0.0 for n in controller.agents}
    wait_sum = 0.0
    queue_sum = 0.0
    speed_sum = 0.0
    steps = 0
    done = False
    while not done:
        clock = env.sim.clock_s
        actions = controller.act(obs, matrix, clock)
        next_obs, rewards, next_matrix, done, info = env.step(actions)
        controller.observe(obs, matrix, actions, rewards, next_obs, next_matrix, done)
        for n, r in rewards.items():
            returns[n] += r
        wait_sum += info.total_waiting_s
        queue_sum += info.total_halting
        speed_sum += info.mean_speed_mps
        steps += 1
        obs, matrix = next_obs, next_matrix
    losses = controller.end_episode()
    return EpisodeResult(
        mean_return=float(np.mean(list(returns.values()))),
        returns=returns,
        wait_s=wait_sum,
        queue_mean=queue_sum / steps,
        speed_mean=speed_sum / steps,
        steps=steps,
        losses=losses,
    )
