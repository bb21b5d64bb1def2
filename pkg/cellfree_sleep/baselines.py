"""Comparison policies: Always-on, DAC-SM1 and a shared-parameter DQN.

Every policy is a callable ``(observations, status) -> JointAction`` and sees
nothing beyond what the environment hands to the MAPPO actors.
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import nn
from .config import DacParams, ScenarioConfig, config_echo, make_rng
from .env import NUM_JOINT_ACTIONS, APStatus, CellFreeEnv, JointAction
from .errors import CheckpointError, TrainingDivergedError
from .mappo import MappoPolicy, TrainResult, huber, load_agent
from .metrics import Policy
from .traffic import TrafficProfile

logger = logging.getLogger(__name__)

PolicyFactory = Callable[[ScenarioConfig, CellFreeEnv, Optional[Path]], Policy]
_POLICIES: Dict[str, PolicyFactory] = {}


def register_policy(name: str):
    def _wrap(fn: PolicyFactory) -> PolicyFactory:
        _POLICIES[name] = fn
        return fn

    return _wrap


def available_policies() -> List[str]:
    return sorted(_POLICIES)


def needs_checkpoint(spec: str) -> bool:
    return spec.split(":", 1)[0] in ("mappo", "dqn")


def resolve_policy(spec: str, cfg: ScenarioConfig, env: CellFreeEnv) -> Policy:
    """``always-on``, ``dac-sm1``, ``mappo:<checkpoint>`` or ``dqn:<checkpoint>``."""
    name, _, arg = spec.partition(":")
    if name not in _POLICIES:
        raise ValueError(f"unknown policy '{name}', expected one of {available_policies()}")
    if needs_checkpoint(spec) and not arg:
        raise CheckpointError(f"policy '{name}' needs a checkpoint: {name}:<path>")
    return _POLICIES[name](cfg, env, Path(arg) if arg else None)


# ----------------------------------------------------------------- fixed rules


def always_on_policy(status: APStatus) -> JointAction:
    """All APs in SM0, antennas growing back to M_max."""
    delta = np.where(status.antennas < status.max_antennas, 1, 0)
    return JointAction(antenna_delta=delta, sleep_choice=np.zeros_like(delta))


def dac_sm1_policy(status: APStatus, params: DacParams = DacParams()) -> JointAction:
    """Idle APs go to SM1; active ones adapt antennas on the achieved/demand ratio.

    An AP is idle when no UE requests it. Zero demand with associated UEs counts
    as an infinite ratio.
    """
    idle = status.associated == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(status.demand_rate > 0, status.achieved_rate / status.demand_rate, np.inf)
    delta = np.where(ratio > params.upper, -1, np.where(ratio < params.lower, 1, 0))
    delta = np.where(idle, 0, delta)
    return JointAction(antenna_delta=delta.astype(int), sleep_choice=idle.astype(int))


class _Rule:
    def __init__(self, name: str, fn: Callable[[APStatus], JointAction]):
        self.name = name
        self._fn = fn

    def __call__(self, observations: np.ndarray, status: APStatus) -> JointAction:
        return self._fn(status)


@register_policy("always-on")
def _always_on(cfg: ScenarioConfig, env: CellFreeEnv, checkpoint: Optional[Path]) -> Policy:
    return _Rule("always-on", always_on_policy)


@register_policy("dac-sm1")
def _dac_sm1(cfg: ScenarioConfig, env: CellFreeEnv, checkpoint: Optional[Path]) -> Policy:
    return _Rule("dac-sm1", lambda status: dac_sm1_policy(status, cfg.dac))


@register_policy("mappo")
def _mappo(cfg: ScenarioConfig, env: CellFreeEnv, checkpoint: Optional[Path]) -> Policy:
    agent, _ = load_agent(checkpoint, cfg, env)
    return MappoPolicy(agent)


# ------------------------------------------------------------------------ DQN


class ReplayBuffer:
    """Uniform ring buffer of per-agent transitions."""

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.position = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs: np.ndarray, actions: np.ndarray, reward: float, next_obs: np.ndarray, done: bool):
        """Store one transition per agent row of ``obs``."""
        for o, a, o2 in zip(obs, actions, next_obs):
            i = self.position
            self.obs[i] = o
            self.actions[i] = a
            self.rewards[i] = reward
            self.next_obs[i] = o2
            self.dones[i] = done
            self.position = (self.position + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
        idx = rng.integers(0, self.size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


def epsilon_at(step: int, start: float, end: float, decay_steps: int) -> float:
    frac = min(step / decay_steps, 1.0)
    return start + (end - start) * frac


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Per-row action index; uniform over all 12 choices with probability epsilon."""
    q_values = np.atleast_2d(q_values)
    explore = rng.random(q_values.shape[0]) < epsilon
    random_actions = rng.integers(0, q_values.shape[1], size=q_values.shape[0])
    return np.where(explore, random_actions, np.argmax(q_values, axis=1))


def td_loss(q_net: nn.Mlp, target_net: nn.Mlp, batch: Tuple[np.ndarray, ...], gamma: float,
            delta: float) -> Tuple[float, List[np.ndarray]]:
    """Huber TD loss against the target network and its gradient w.r.t. ``q_net``."""
    obs, actions, rewards, next_obs, dones = batch
    target = rewards + gamma * np.where(dones, 0.0, target_net.forward(next_obs).max(axis=1))
    q, inputs = q_net.forward_cached(obs)
    rows = np.arange(len(actions))
    e = q[rows, actions] - target
    n = len(actions)
    loss = float(np.mean(huber(e, delta)))
    out_grad = np.zeros_like(q)
    out_grad[rows, actions] = np.clip(e, -delta, delta) / n
    return loss, q_net.backward(obs, out_grad, inputs)


class DqnAgent:
    def __init__(self, cfg: ScenarioConfig, obs_dim: int):
        self.cfg = cfg
        rng = make_rng(cfg.rng_seed, "init/dqn")
        self.q = nn.Mlp([obs_dim, *cfg.network.actor_hidden, NUM_JOINT_ACTIONS], rng, head_gain=1.0)
        self.target = self.q.copy()
        self.opt = nn.Adam(self.q.params(), cfg.dqn.lr)

    def sync_target(self):
        self.target = self.q.copy()

    def save(self, path: Path, meta: dict) -> Path:
        meta = {"algo": "dqn", "config": json.loads(config_echo(self.cfg)), **meta}
        return nn.save_checkpoint(path, {"q": self.q, "target": self.target}, {"q": self.opt}, meta)

    def restore(self, ckpt: nn.Checkpoint):
        if ckpt.meta.get("algo") != "dqn":
            raise CheckpointError(f"expected a dqn checkpoint, got {ckpt.meta.get('algo')!r}")
        for name, net in (("q", self.q), ("target", self.target)):
            if name not in ckpt.networks:
                raise CheckpointError(f"checkpoint lacks network '{name}'")
            nn.restore_network(net, ckpt.networks[name], name)
        if "q" in ckpt.optimizers:
            nn.restore_optimizer(self.opt, ckpt.optimizers["q"], "q")


class DqnPolicy:
    name = "dqn"

    def __init__(self, agent: DqnAgent):
        self.agent = agent

    def __call__(self, observations: np.ndarray, status: APStatus) -> JointAction:
        return JointAction.from_indices(np.argmax(self.agent.q.forward(observations), axis=1))


@register_policy("dqn")
def _dqn(cfg: ScenarioConfig, env: CellFreeEnv, checkpoint: Optional[Path]) -> Policy:
    agent = DqnAgent(cfg, env.obs_dim)
    agent.restore(nn.load_checkpoint(checkpoint))
    return DqnPolicy(agent)


DQN_CURVE_COLUMNS = ["iteration", "env_steps", "episodes", "mean_reward", "epsilon", "td_loss", "p_net",
                     "drop_ratio"]


class DqnTrainResult(TrainResult):
    updates: int


class DqnTrainer:
    """Epsilon-greedy collection with one TD update per decision step once warmed up."""

    def __init__(self, cfg: ScenarioConfig, out_dir: Path, profile: Optional[TrafficProfile] = None,
                 base_dir: Optional[Path] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.env = CellFreeEnv(cfg, profile, base_dir)
        self.agent = DqnAgent(cfg, self.env.obs_dim)
        self.replay = ReplayBuffer(cfg.dqn.replay_capacity, self.env.obs_dim)
        self.rng = make_rng(cfg.rng_seed, "policy/dqn")
        self.decisions = 0
        self.updates = 0
        self.env_steps = 0
        self.episodes_done = 0
        self.rows: List[dict] = []

    def _budget_left(self) -> bool:
        rl = self.cfg.rl
        if rl.max_env_steps is not None:
            return self.env_steps < rl.max_env_steps
        return self.episodes_done < rl.episodes

    def _learn(self) -> Optional[float]:
        dqn = self.cfg.dqn
        if len(self.replay) < max(dqn.learn_start, dqn.batch_size):
            return None
        batch = self.replay.sample(dqn.batch_size, self.rng)
        loss, grads = td_loss(self.agent.q, self.agent.target, batch, dqn.gamma, self.cfg.rl.huber_delta)
        grads, norm = nn.clip_grads(grads, self.cfg.rl.max_grad_norm)
        if not (np.isfinite(loss) and np.isfinite(norm)):
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump = self.out_dir / "divergence.json"
            dump.write_text(json.dumps({"updates": self.updates, "env_steps": self.env_steps,
                                        "td_loss": str(loss), "grad_norm": str(norm)}, indent=2))
            logger.error("DQN diverged after %d updates", self.updates)
            raise TrainingDivergedError(f"DQN diverged after {self.updates} updates", dump)
        self.agent.opt.step(self.agent.q.params(), grads)
        self.updates += 1
        if self.updates % dqn.target_sync == 0:
            self.agent.sync_target()
        return loss

    def train(self, max_iterations: Optional[int] = None) -> DqnTrainResult:
        dqn = self.cfg.dqn
        block = self.cfg.rl.rollout_length
        obs, _ = self.env.reset(episode=0)
        iteration = 0
        rewards, losses = [], []
        energy = ticks = 0.0
        while self._budget_left() and (max_iterations is None or iteration < max_iterations):
            eps = epsilon_at(self.decisions, dqn.eps_start, dqn.eps_end, dqn.eps_decay_steps)
            idx = epsilon_greedy(self.agent.q.forward(obs), eps, self.rng)
            result = self.env.step(JointAction.from_indices(idx))
            self.replay.push(obs, idx, result.reward, result.observations, result.done)
            self.decisions += 1
            self.env_steps += result.info.timesteps
            energy += result.info.energy_w_steps
            ticks += result.info.timesteps
            rewards.append(result.reward)
            obs = result.observations
            loss = self._learn()
            if loss is not None:
                losses.append(loss)
            if result.done:
                self.episodes_done += 1
                obs, _ = self.env.reset(episode=self.episodes_done)
            if self.decisions % block == 0 or not self._budget_left():
                iteration += 1
                self.rows.append({
                    "iteration": iteration, "env_steps": self.env_steps, "episodes": self.episodes_done,
                    "mean_reward": float(np.mean(rewards)), "epsilon": eps,
                    "td_loss": float(np.mean(losses)) if losses else 0.0,
                    "p_net": energy / max(ticks, 1), "drop_ratio": self.env.ledger.mean_drop,
                })
                logger.info("DQN iteration %d: reward %.3f, epsilon %.3f", iteration, self.rows[-1]["mean_reward"], eps)
                rewards, losses = [], []
                energy = ticks = 0.0
                if iteration % self.cfg.rl.checkpoint_every == 0:
                    self._checkpoint(iteration)

        ckpt = self._checkpoint(iteration)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        curves = self.out_dir / "learning_curve.csv"
        pd.DataFrame(self.rows, columns=DQN_CURVE_COLUMNS).to_csv(curves, index=False)
        return DqnTrainResult(iterations=iteration, env_steps=self.env_steps, episodes=self.episodes_done,
                              checkpoint=ckpt, curves=curves, updates=self.updates)

    def _checkpoint(self, iteration: int) -> Path:
        return self.agent.save(self.out_dir / "checkpoint.npz",
                               {"iteration": iteration, "env_steps": self.env_steps,
                                "episodes": self.episodes_done, "updates": self.updates})


def dqn_train(cfg: ScenarioConfig, out_dir: Path, profile: Optional[TrafficProfile] = None,
              base_dir: Optional[Path] = None, max_iterations: Optional[int] = None) -> DqnTrainResult:
    return DqnTrainer(cfg, out_dir, profile, base_dir).train(max_iterations)
