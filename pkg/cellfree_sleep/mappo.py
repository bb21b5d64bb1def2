"""Multi-agent PPO with a centralised critic.

Actors see their AP's local observation and emit the factored (antenna,
sleep) action; the critic sees the global state. All agents share the
global reward and the critic's advantage. Actors share one parameter set
unless ``rl.share_actor_params`` is false.
"""

import json
import logging
from pathlib import Path
from typing import Callable, List, NoReturn, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from . import nn
from .config import ScenarioConfig, config_echo, make_rng
from .env import APStatus, CellFreeEnv, JointAction, StepResult
from .errors import CheckpointError, TrainingDivergedError
from .metrics import EvalResult, run_episodes
from .traffic import TrafficProfile

logger = logging.getLogger(__name__)

ADV_EPS = 1e-8
CURVE_COLUMNS = ["iteration", "env_steps", "episodes", "mean_reward", "entropy", "policy_loss",
                 "value_loss", "grad_norm", "p_net", "drop_ratio"]
EPISODE_COLUMNS = ["episode", "return", "p_net", "drop_ratio", "departures"]


class TrajectoryBuffer:
    """Fixed-capacity rollout store, one row per decision step."""

    def __init__(self, capacity: int, num_agents: int, obs_dim: int, state_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, num_agents, obs_dim))
        self.actions = np.zeros((capacity, num_agents, len(nn.HEAD_SIZES)), dtype=int)
        self.logprobs = np.zeros((capacity, num_agents))
        self.states = np.zeros((capacity, state_dim))
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.advantages = np.zeros(0)
        self.returns = np.zeros(0)

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, logprobs, state, reward: float, value: float, done: bool):
        if self.size >= self.capacity:
            raise IndexError("trajectory buffer is full")
        i = self.size
        self.obs[i] = obs
        self.actions[i] = actions
        self.logprobs[i] = logprobs
        self.states[i] = state
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.size += 1

    def finish(self, bootstrap: float, gamma: float, psi: float, normalize: bool = True):
        n = self.size
        adv, ret = compute_gae(self.rewards[:n], self.values[:n], bootstrap, gamma, psi, self.dones[:n])
        self.returns = ret
        self.advantages = normalize_advantages(adv) if normalize else adv

    def clear(self):
        self.size = 0


def compute_gae(rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float, psi: float,
                dones: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """A_t = delta_t + gamma psi A_{t+1}; returns = A + V.

    ``dones[t]`` cuts the recursion after step t (no bootstrap across episodes).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    if dones is None:
        dones = np.zeros(n, dtype=bool)
    adv = np.zeros(n)
    next_value = bootstrap
    running = 0.0
    for t in reversed(range(n)):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * psi * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    return (adv - adv.mean()) / (adv.std() + ADV_EPS)


class PolicyLoss(BaseModel):
    """Negated clipped surrogate plus entropy bonus, with gradients w.r.t. new log-probs and entropies."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    loss: float
    surrogate: float
    entropy: float
    d_logprob: np.ndarray
    d_entropy: np.ndarray
    clip_fraction: float


def policy_loss(new_logprobs: np.ndarray, old_logprobs: np.ndarray, advantages: np.ndarray,
                entropies: np.ndarray, clip_eps: float, entropy_coef: float) -> PolicyLoss:
    """L = -(mean(min(r A, clip(r, 1-eps, 1+eps) A)) + c_e mean(H))."""
    ratio = np.exp(np.asarray(new_logprobs) - np.asarray(old_logprobs))
    if not np.all(np.isfinite(ratio)):
        raise TrainingDivergedError("non-finite policy ratio")
    adv = np.asarray(advantages, dtype=float)
    n = ratio.size
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    use_unclipped = unclipped <= clipped
    surrogate = float(np.mean(np.minimum(unclipped, clipped)))
    entropy = float(np.mean(entropies))
    return PolicyLoss(
        loss=-(surrogate + entropy_coef * entropy),
        surrogate=surrogate,
        entropy=entropy,
        d_logprob=-np.where(use_unclipped, unclipped, 0.0) / n,
        d_entropy=np.full(n, -entropy_coef / n),
        clip_fraction=float(np.mean(~use_unclipped)),
    )


def huber(errors: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(errors)
    return np.where(a <= delta, 0.5 * errors**2, delta * (a - 0.5 * delta))


def value_loss(values_pred: np.ndarray, returns: np.ndarray, delta: float) -> Tuple[float, np.ndarray]:
    """Mean Huber loss and its gradient w.r.t. the predictions."""
    e = np.asarray(values_pred, dtype=float) - np.asarray(returns, dtype=float)
    return float(np.mean(huber(e, delta))), np.clip(e, -delta, delta) / e.size


class TrainResult(BaseModel):
    iterations: int
    env_steps: int
    episodes: int
    checkpoint: Path
    curves: Path


class MappoAgent:
    """Actor(s) and critic with their optimisers."""

    def __init__(self, cfg: ScenarioConfig, obs_dim: int, state_dim: int):
        self.cfg = cfg
        rng = make_rng(cfg.rng_seed, "init/mappo")
        self.shared = cfg.rl.share_actor_params
        net = cfg.network
        actor_sizes = [obs_dim, *net.actor_hidden, sum(nn.HEAD_SIZES)]
        num_actors = 1 if self.shared else cfg.num_aps
        self.actors = [nn.Mlp(actor_sizes, rng, head_gain=net.head_gain) for _ in range(num_actors)]
        self.critic = nn.Mlp([state_dim, *net.critic_hidden, 1], rng, head_gain=1.0)
        self.actor_opts = [nn.Adam(a.params(), cfg.rl.actor_lr) for a in self.actors]
        self.critic_opt = nn.Adam(self.critic.params(), cfg.rl.critic_lr)

    def logits(self, obs: np.ndarray) -> np.ndarray:
        """obs ``[L x d]`` -> logits ``[L x 7]``."""
        if self.shared:
            return self.actors[0].forward(obs)
        return np.stack([a.forward(obs[l]) for l, a in enumerate(self.actors)])

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return nn.sample_and_logprob(self.logits(obs), rng)

    def greedy(self, obs: np.ndarray) -> np.ndarray:
        return nn.greedy(self.logits(obs))

    def value(self, state: np.ndarray) -> float:
        return float(self.critic.forward(state)[0])

    def networks(self) -> dict:
        nets = {f"actor{i}": a for i, a in enumerate(self.actors)}
        nets["critic"] = self.critic
        return nets

    def optimizers(self) -> dict:
        opts = {f"actor{i}": o for i, o in enumerate(self.actor_opts)}
        opts["critic"] = self.critic_opt
        return opts

    def save(self, path: Path, iteration: int = 0, env_steps: int = 0, episodes: int = 0) -> Path:
        meta = {"algo": "mappo", "iteration": iteration, "env_steps": env_steps, "episodes": episodes,
                "num_actors": len(self.actors), "config": json.loads(config_echo(self.cfg))}
        return nn.save_checkpoint(path, self.networks(), self.optimizers(), meta)

    def restore(self, ckpt: nn.Checkpoint):
        if ckpt.meta.get("algo") != "mappo":
            raise CheckpointError(f"expected a mappo checkpoint, got {ckpt.meta.get('algo')!r}")
        nets = self.networks()
        if set(ckpt.networks) != set(nets):
            raise CheckpointError(
                f"checkpoint holds networks {sorted(ckpt.networks)}, scenario needs {sorted(nets)}"
            )
        for name, net in nets.items():
            nn.restore_network(net, ckpt.networks[name], name)
        for name, opt in self.optimizers().items():
            if name in ckpt.optimizers:
                nn.restore_optimizer(opt, ckpt.optimizers[name], name)


class MappoPolicy:
    """Greedy decentralised execution of trained actors."""

    name = "mappo"

    def __init__(self, agent: MappoAgent):
        self.agent = agent

    def __call__(self, observations: np.ndarray, status: APStatus) -> JointAction:
        heads = self.agent.greedy(observations)
        return JointAction.from_heads(heads[:, 0], heads[:, 1])


def load_agent(path: Path, cfg: ScenarioConfig, env: CellFreeEnv) -> Tuple[MappoAgent, nn.Checkpoint]:
    ckpt = nn.load_checkpoint(path)
    agent = MappoAgent(cfg, env.obs_dim, env.state_dim)
    agent.restore(ckpt)
    return agent, ckpt


class MappoTrainer:
    def __init__(self, cfg: ScenarioConfig, out_dir: Path, profile: Optional[TrafficProfile] = None,
                 base_dir: Optional[Path] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.env = CellFreeEnv(cfg, profile, base_dir)
        self.agent = MappoAgent(cfg, self.env.obs_dim, self.env.state_dim)
        self.rng = make_rng(cfg.rng_seed, "policy/mappo")
        self.buffer = TrajectoryBuffer(cfg.rl.rollout_length, self.env.num_agents, self.env.obs_dim,
                                       self.env.state_dim)
        self.iteration = 0
        self.env_steps = 0
        self.episodes_done = 0
        self.episode_rows: List[dict] = []
        self.curve_rows: List[dict] = []
        self._episode_return = 0.0
        self._episode_energy = 0.0
        self._episode_ticks = 0
        self._obs, self._state = self.env.reset(episode=0)

    def resume(self, path: Path):
        ckpt = nn.load_checkpoint(path)
        self.agent.restore(ckpt)
        self.iteration = int(ckpt.meta.get("iteration", 0))
        self.env_steps = int(ckpt.meta.get("env_steps", 0))
        self.episodes_done = int(ckpt.meta.get("episodes", 0))
        self._obs, self._state = self.env.reset(episode=self.episodes_done)
        self.rng = make_rng(self.cfg.rng_seed, f"policy/mappo/{self.iteration}")
        logger.info("Resumed from %s at iteration %d", path, self.iteration)

    def _budget_left(self) -> bool:
        rl = self.cfg.rl
        if rl.max_env_steps is not None:
            return self.env_steps < rl.max_env_steps
        return self.episodes_done < rl.episodes

    def _end_episode(self, result: StepResult):
        ticks = max(self._episode_ticks, 1)
        self.episode_rows.append({
            "episode": self.episodes_done,
            "return": self._episode_return,
            "p_net": self._episode_energy / ticks,
            "drop_ratio": self.env.ledger.mean_drop,
            "departures": len(self.env.ledger),
        })
        logger.info("Episode %d: return %.3f, P_net %.1f W, drop %.4f", self.episodes_done,
                    self._episode_return, self._episode_energy / ticks, self.env.ledger.mean_drop)
        self.episodes_done += 1
        self._episode_return = self._episode_energy = 0.0
        self._episode_ticks = 0
        self._obs, self._state = self.env.reset(episode=self.episodes_done)

    def collect(self) -> dict:
        """Fill the buffer with one rollout under the current actors."""
        self.buffer.clear()
        energy = ticks = 0.0
        entropy = []
        done = False
        while len(self.buffer) < self.buffer.capacity and self._budget_left():
            actions, logp, ent = self.agent.act(self._obs, self.rng)
            value = self.agent.value(self._state)
            result = self.env.step(JointAction.from_heads(actions[:, 0], actions[:, 1]))
            done = result.done
            self.buffer.add(self._obs, actions, logp, self._state, result.reward, value, done)
            entropy.append(float(np.mean(ent)))
            info = result.info
            energy += info.energy_w_steps
            ticks += info.timesteps
            self.env_steps += info.timesteps
            self._episode_return += result.reward
            self._episode_energy += info.energy_w_steps
            self._episode_ticks += info.timesteps
            self._obs, self._state = result.observations, result.global_state
            if done:
                self._end_episode(result)

        bootstrap = 0.0 if done else self.agent.value(self._state)
        rl = self.cfg.rl
        self.buffer.finish(bootstrap, rl.gamma, rl.gae_lambda, rl.normalize_advantages)
        n = max(len(self.buffer), 1)
        return {
            "mean_reward": float(self.buffer.rewards[: len(self.buffer)].sum() / n),
            "entropy": float(np.mean(entropy)) if entropy else 0.0,
            "p_net": energy / max(ticks, 1),
        }

    def _diverged(self, what: str, stats: dict) -> NoReturn:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = self.out_dir / "divergence.json"
        with open(dump, "w") as f:
            json.dump({"iteration": self.iteration, "env_steps": self.env_steps, "cause": what, **stats},
                      f, indent=2, default=float)
        logger.error("Training diverged at iteration %d: %s", self.iteration, what)
        raise TrainingDivergedError(f"training diverged at iteration {self.iteration}: {what}", dump)

    def _actor_update(self, actor: nn.Mlp, opt: nn.Adam, obs, actions, old_logp, adv) -> Tuple[PolicyLoss, float]:
        rl = self.cfg.rl
        logits, inputs = actor.forward_cached(obs)
        heval = nn.evaluate_heads(logits, actions)
        try:
            pl = policy_loss(heval.logprob, old_logp, adv, heval.entropy, rl.clip_eps, rl.entropy_coef)
        except TrainingDivergedError as e:
            self._diverged(str(e), {})
        d_logits = nn.heads_grad(heval, actions, pl.d_logprob, pl.d_entropy)
        grads, norm = nn.clip_grads(actor.backward(obs, d_logits, inputs), rl.max_grad_norm)
        if not (np.isfinite(pl.loss) and np.isfinite(norm)):
            self._diverged("non-finite actor loss", {"policy_loss": pl.loss, "grad_norm": norm})
        opt.step(actor.params(), grads)
        return pl, norm

    def update(self) -> dict:
        rl = self.cfg.rl
        buf = self.buffer
        n = len(buf)
        if n == 0:
            return {"policy_loss": 0.0, "value_loss": 0.0, "grad_norm": 0.0}
        L = self.env.num_agents
        p_losses, v_losses, norms = [], [], []
        for _ in range(rl.ppo_epochs):
            perm = self.rng.permutation(n)
            for mb in np.array_split(perm, min(rl.minibatches, n)):
                adv = np.repeat(buf.advantages[mb], L)
                if self.agent.shared:
                    pl, norm = self._actor_update(
                        self.agent.actors[0], self.agent.actor_opts[0],
                        buf.obs[mb].reshape(-1, buf.obs.shape[-1]),
                        buf.actions[mb].reshape(-1, buf.actions.shape[-1]),
                        buf.logprobs[mb].reshape(-1), adv,
                    )
                    p_losses.append(pl.loss)
                    norms.append(norm)
                else:
                    for l, (actor, opt) in enumerate(zip(self.agent.actors, self.agent.actor_opts)):
                        pl, norm = self._actor_update(actor, opt, buf.obs[mb, l], buf.actions[mb, l],
                                                      buf.logprobs[mb, l], buf.advantages[mb])
                        p_losses.append(pl.loss)
                        norms.append(norm)

                critic = self.agent.critic
                pred, inputs = critic.forward_cached(buf.states[mb])
                vl, d_pred = value_loss(pred[:, 0], buf.returns[mb], rl.huber_delta)
                grads, norm = nn.clip_grads(critic.backward(buf.states[mb], d_pred[:, None], inputs),
                                            rl.max_grad_norm)
                if not (np.isfinite(vl) and np.isfinite(norm)):
                    self._diverged("non-finite value loss", {"value_loss": vl, "grad_norm": norm})
                self.agent.critic_opt.step(critic.params(), grads)
                v_losses.append(vl)
        return {
            "policy_loss": float(np.mean(p_losses)),
            "value_loss": float(np.mean(v_losses)),
            "grad_norm": float(np.mean(norms)),
        }

    def run_iteration(self) -> dict:
        rollout = self.collect()
        losses = self.update()
        self.iteration += 1
        row = {"iteration": self.iteration, "env_steps": self.env_steps, "episodes": self.episodes_done,
               **rollout, **losses, "drop_ratio": self.env.ledger.mean_drop}
        self.curve_rows.append(row)
        logger.info("Iteration %d: reward %.3f, entropy %.3f, P_net %.1f W", self.iteration,
                    row["mean_reward"], row["entropy"], row["p_net"])
        return row

    def write_curves(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "learning_curve.csv"
        pd.DataFrame(self.curve_rows, columns=CURVE_COLUMNS).to_csv(path, index=False)
        pd.DataFrame(self.episode_rows, columns=EPISODE_COLUMNS).to_csv(self.out_dir / "episodes.csv", index=False)
        return path

    def checkpoint(self) -> Path:
        return self.agent.save(self.out_dir / "checkpoint.npz", self.iteration, self.env_steps, self.episodes_done)

    def train(self, max_iterations: Optional[int] = None,
              on_iteration: Optional[Callable[[dict], None]] = None) -> TrainResult:
        done_iters = 0
        while self._budget_left() and (max_iterations is None or done_iters < max_iterations):
            row = self.run_iteration()
            done_iters += 1
            if on_iteration is not None:
                on_iteration(row)
            if self.iteration % self.cfg.rl.checkpoint_every == 0:
                self.checkpoint()
        ckpt = self.checkpoint()
        curves = self.write_curves()
        return TrainResult(iterations=self.iteration, env_steps=self.env_steps, episodes=self.episodes_done,
                           checkpoint=ckpt, curves=curves)


def train(cfg: ScenarioConfig, out_dir: Path, profile: Optional[TrafficProfile] = None,
          base_dir: Optional[Path] = None, resume: Optional[Path] = None,
          max_iterations: Optional[int] = None) -> TrainResult:
    trainer = MappoTrainer(cfg, out_dir, profile, base_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.train(max_iterations)


def evaluate(checkpoint: Path, cfg: ScenarioConfig, episodes: int, out_dir: Optional[Path] = None,
             profile: Optional[TrafficProfile] = None, base_dir: Optional[Path] = None) -> EvalResult:
    """Greedy evaluation on the paired evaluation episodes."""
    env = CellFreeEnv(cfg, profile, base_dir)
    agent, _ = load_agent(Path(checkpoint), cfg, env)
    return run_episodes(MappoPolicy(agent), cfg, episodes, out_dir=out_dir, env=env)
