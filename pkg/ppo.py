# ppo.py - PPO over the multi-discrete policy, with coded macros injected as extra functional tokens.
# Responsibilities:
#   - ExtendedActionSpace: base cardinalities plus macro tokens at F..F+M-1.
#   - Rollout collection with auto-reset; a macro token runs its whole script as one transition.
#   - GAE with gamma^frames discounting, clipped-surrogate updates on the autodiff tape.
#   - train(): iterate rollouts/updates, evaluate on fresh seeds, keep the best-success network.

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from actionscript import MacroAction, Script, interpret
from autodiff import AdamOptimizer, GradTape, Mlp, ObservationEncoder, encode_checkpoint
from config import PpoSettings, RewardSettings
from errors import ConfigError, MacroError, MinicraftError, RolloutError
from minicraft import FN_NOOP, GameData, MiniCraftEnv, MultiDiscreteAction, TaskSpec, load_game_data
from rewards import RewardShaper

logger = logging.getLogger(__name__)

FUNCTIONAL_DIM = 4
MAX_PREFIX_FINISHES = 100
PREFIX_STEP_BUDGET = 200


# ---------------------- action space ---------------------- #
@dataclass(frozen=True)
class ExtendedActionSpace:
    base: Tuple[int, ...]
    macros: Tuple[MacroAction, ...] = ()

    @property
    def base_functional(self) -> int:
        return self.base[FUNCTIONAL_DIM]

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        dims = list(self.base)
        dims[FUNCTIONAL_DIM] += len(self.macros)
        return tuple(dims)

    def macro_for(self, functional: int) -> Optional[MacroAction]:
        if functional < self.base_functional:
            return None
        return self.macros[functional - self.base_functional]

    def token_of(self, macro_id: str) -> int:
        for i, macro in enumerate(self.macros):
            if macro.macro_id == macro_id:
                return self.base_functional + i
        raise MacroError(f"unknown macro '{macro_id}'")

    def without_macros(self) -> "ExtendedActionSpace":
        return ExtendedActionSpace(self.base)

    def describe(self) -> List[str]:
        names = ["noop", "use", "attack", "craft", "place", "destroy"]
        lines = [f"functional {i}: {name}" for i, name in enumerate(names[: self.base_functional])]
        for i, macro in enumerate(self.macros):
            lines.append(f"functional {self.base_functional + i}: macro {macro.macro_id} ({macro.frame_cap} frames max)")
        return lines


def build_action_space(base: Sequence[int], macros: Sequence[MacroAction] = ()) -> ExtendedActionSpace:
    seen = set()
    for macro in macros:
        if macro.macro_id in seen:
            raise MacroError(f"duplicate macro id '{macro.macro_id}'")
        seen.add(macro.macro_id)
    return ExtendedActionSpace(tuple(base), tuple(macros))


# ---------------------- config ---------------------- #
@dataclass
class RlConfig:
    task: TaskSpec
    reward: RewardSettings = field(default_factory=RewardSettings)
    macros: Tuple[MacroAction, ...] = ()
    prefix: Tuple[Script, ...] = ()
    rollout_length: int = 1024
    epochs: int = 4
    minibatch_size: int = 256
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    hidden_dim: int = 64
    eval_episodes: int = 100
    eval_every: int = 5
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_epsilon <= 0:
            raise ConfigError(f"clip_epsilon must be positive, got {self.clip_epsilon}")
        if self.rollout_length <= 0 or self.epochs <= 0 or self.minibatch_size <= 0:
            raise ConfigError("rollout_length, epochs and minibatch_size must be positive")

    @classmethod
    def from_settings(cls, task: TaskSpec, ppo: PpoSettings, reward: RewardSettings, seed: int,
                      macros: Sequence[MacroAction] = (), prefix: Sequence[Script] = ()) -> "RlConfig":
        return cls(
            task=task,
            reward=reward,
            macros=tuple(macros),
            prefix=tuple(prefix),
            rollout_length=ppo.rollout_length,
            epochs=ppo.epochs,
            minibatch_size=ppo.minibatch_size,
            clip_epsilon=ppo.clip_epsilon,
            gamma=ppo.gamma,
            gae_lambda=ppo.gae_lambda,
            learning_rate=ppo.learning_rate,
            entropy_coef=ppo.entropy_coef,
            value_coef=ppo.value_coef,
            hidden_dim=ppo.hidden_dim,
            eval_episodes=ppo.eval_episodes,
            eval_every=ppo.eval_every,
            seed=seed,
        )


@dataclass
class Transition:
    obs_vec: np.ndarray
    action: Tuple[int, ...]
    log_prob: float
    value: float
    reward: float
    frames_consumed: int = 1
    done: bool = False
    macro_id: Optional[str] = None


# ---------------------- policy ---------------------- #
def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(probs) - 1)


class Policy:
    """Categorical heads over the extended action space, driven by an Mlp."""

    def __init__(self, net: Mlp, encoder: ObservationEncoder, space: ExtendedActionSpace):
        if tuple(net.head_dims) != space.cardinalities:
            raise ConfigError(f"network heads {net.head_dims} do not match action space {space.cardinalities}")
        self.net = net
        self.encoder = encoder
        self.space = space

    def sample(self, obs_vec: np.ndarray, rng: np.random.Generator) -> Tuple[Tuple[int, ...], float, float]:
        logits, value = self.net.forward(obs_vec)
        action, log_prob = [], 0.0
        for lg in logits:
            z = lg - lg.max()
            logp = z - math.log(np.exp(z).sum())
            a = _sample_categorical(np.exp(logp), rng)
            action.append(a)
            log_prob += float(logp[a])
        return tuple(action), log_prob, float(value)

    def value(self, obs_vec: np.ndarray) -> float:
        return float(self.net.forward(obs_vec)[1])


# ---------------------- rollouts ---------------------- #
@dataclass
class EpisodeStats:
    returns: List[float] = field(default_factory=list)
    successes: List[bool] = field(default_factory=list)
    lengths: List[int] = field(default_factory=list)


class RolloutWorker:
    """Owns one env; resets with seeds drawn from its own generator."""

    def __init__(self, cfg: RlConfig, space: ExtendedActionSpace, env: Optional[MiniCraftEnv] = None,
                 data: Optional[GameData] = None, seed: Optional[int] = None):
        self.cfg = cfg
        self.space = space
        self.env = env or MiniCraftEnv(data)
        self.data = self.env.data
        self.encoder = ObservationEncoder(self.data)
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.shaper = RewardShaper(cfg.task, self.data, cfg.reward)
        self.stats = EpisodeStats()
        self.frames = 0
        self._episode_return = 0.0
        self._episode_start_tick = 0
        self._shaper_ready = False
        if self.env.state is not None and not self.env.done:
            self._begin_episode()

    def _begin_episode(self) -> None:
        self.shaper.reset(self.env.observation)
        self._episode_return = 0.0
        self._episode_start_tick = self.env.state.tick
        self._shaper_ready = True

    def _finish_episode(self) -> None:
        self.stats.returns.append(self._episode_return)
        self.stats.successes.append(bool(self.env.success))
        self.stats.lengths.append(self.env.state.tick - self._episode_start_tick)
        self._shaper_ready = False

    def reset(self) -> None:
        """Start a fresh episode, running the sequential coded prefix first."""
        for _ in range(MAX_PREFIX_FINISHES):
            seed = int(self.rng.integers(0, 2**63 - 1))
            self.env.reset(self.cfg.task, seed)
            for script in self.cfg.prefix:
                if self.env.done:
                    break
                outcome = interpret(script, self.env, PREFIX_STEP_BUDGET)
                self.frames += outcome.steps_used
            if not self.env.done:
                self._begin_episode()
                return
            self.stats.returns.append(0.0)
            self.stats.successes.append(bool(self.env.success))
            self.stats.lengths.append(self.env.state.tick)
        raise RolloutError("the coded prefix ends every episode; there is nothing left for RL to act on")

    def _frame_hook(self, sink: List[float]):
        def hook(obs, done, events):
            reward, _ = self.shaper.step(obs, self.env.success)
            sink.append(reward)
        return hook

    def act(self, action: Tuple[int, ...]) -> Tuple[float, int, bool, Optional[str]]:
        """Execute one decision; returns (discounted reward, frames, done, macro id)."""
        if not self._shaper_ready:
            self.reset()
        rewards: List[float] = []
        macro = self.space.macro_for(action[FUNCTIONAL_DIM])
        try:
            if macro is None:
                _, obs, done, _ = self.env.step(MultiDiscreteAction.from_vector(action))
                self._frame_hook(rewards)(obs, done, [])
            else:
                macro.run(self.env, on_step=self._frame_hook(rewards))
                if not rewards and not self.env.done:
                    # a macro that issued nothing still costs its decision one frame
                    _, obs, done, _ = self.env.step(MultiDiscreteAction(yaw_delta=self.env.yaw_bins // 2, functional=FN_NOOP))
                    self._frame_hook(rewards)(obs, done, [])
        except MinicraftError as e:
            raise RolloutError(f"environment fault during rollout: {e}") from e
        frames = len(rewards)
        self.frames += frames
        self._episode_return += sum(rewards)
        discounted = sum((self.cfg.gamma ** j) * r for j, r in enumerate(rewards))
        done = self.env.done
        if done:
            self._finish_episode()
        return discounted, frames, done, macro.macro_id if macro else None

    def observation_vector(self) -> np.ndarray:
        if not self._shaper_ready:
            self.reset()
        return self.encoder.encode(self.env.observation)

    def collect(self, policy, n: int, rng: np.random.Generator) -> List[Transition]:
        transitions = []
        for _ in range(n):
            obs_vec = self.observation_vector()
            action, log_prob, value = policy.sample(obs_vec, rng)
            reward, frames, done, macro_id = self.act(action)
            transitions.append(Transition(obs_vec, action, log_prob, value, reward, frames, done, macro_id))
        return transitions

    def bootstrap_value(self, policy) -> float:
        if not self._shaper_ready or self.env.done:
            return 0.0
        return policy.value(self.encoder.encode(self.env.observation))


def collect_rollout(policy, env: MiniCraftEnv, space: ExtendedActionSpace, cfg: RlConfig,
                    rng: Optional[np.random.Generator] = None) -> List[Transition]:
    """Collect exactly cfg.rollout_length transitions, auto-resetting finished episodes."""
    worker = RolloutWorker(cfg, space, env=env)
    return worker.collect(policy, cfg.rollout_length, rng or np.random.default_rng(cfg.seed))


# ---------------------- advantages ---------------------- #
def gae(transitions: Sequence[Transition], gamma: float, lam: float, last_value: float = 0.0,
        normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates with gamma^k discounting for k-frame transitions.

    `last_value` bootstraps the final transition when its episode is still running.
    Returns (advantages, returns); returns are computed from the raw advantages.
    """
    n = len(transitions)
    adv = np.zeros(n)
    values = np.array([t.value for t in transitions], dtype=float)
    next_value, next_adv = last_value, 0.0
    for i in range(n - 1, -1, -1):
        tr = transitions[i]
        if tr.done:
            next_value, next_adv = 0.0, 0.0
        discount = gamma ** tr.frames_consumed
        delta = tr.reward + discount * next_value - tr.value
        adv[i] = delta + discount * lam * next_adv
        next_value, next_adv = tr.value, adv[i]
    returns = adv + values
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# ---------------------- update ---------------------- #
def ppo_loss(tape: GradTape, net: Mlp, obs: np.ndarray, actions: np.ndarray, old_log_probs: np.ndarray,
             advantages: np.ndarray, returns: np.ndarray, clip_epsilon: float, value_coef: float,
             entropy_coef: float):
    """Record the clipped-surrogate loss on `tape`; returns (loss node, numbers for logging)."""
    logits, values = net.forward_tape(tape, obs)
    log_prob, entropy = None, None
    for d, lg in enumerate(logits):
        ls = tape.log_softmax(lg)
        lp = tape.take(ls, actions[:, d])
        ent = tape.neg(tape.sum(tape.mul(tape.exp(ls), ls), axis=1))
        log_prob = lp if log_prob is None else tape.add(log_prob, lp)
        entropy = ent if entropy is None else tape.add(entropy, ent)
    ratio = tape.exp(tape.sub(log_prob, tape.constant(old_log_probs)))
    adv = tape.constant(advantages)
    unclipped = tape.mul(ratio, adv)
    clipped = tape.mul(tape.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon), adv)
    policy_loss = tape.neg(tape.mean(tape.minimum(unclipped, clipped)))
    value_loss = tape.mean(tape.square(tape.sub(values, tape.constant(returns))))
    entropy_mean = tape.mean(entropy)
    loss = tape.add(policy_loss, tape.sub(tape.scale(value_loss, value_coef), tape.scale(entropy_mean, entropy_coef)))
    r = ratio.value
    info = {
        "policy_loss": float(policy_loss.value),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy_mean.value),
        "approx_kl": float(np.mean(old_log_probs - log_prob.value)),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > clip_epsilon)),
    }
    return loss, info


def ppo_update(net: Mlp, optimizer: AdamOptimizer, transitions: Sequence[Transition], advantages: np.ndarray,
               returns: np.ndarray, cfg: RlConfig, rng: np.random.Generator) -> Dict[str, float]:
    obs = np.stack([t.obs_vec for t in transitions])
    actions = np.array([t.action for t in transitions], dtype=int)
    old_log_probs = np.array([t.log_prob for t in transitions], dtype=float)
    n = len(transitions)
    totals: Dict[str, float] = {}
    updates = skipped = 0
    rejected_before = optimizer.rejected
    tape = GradTape()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start:start + cfg.minibatch_size]
            loss, info = ppo_loss(tape, net, obs[mb], actions[mb], old_log_probs[mb], advantages[mb], returns[mb],
                                  cfg.clip_epsilon, cfg.value_coef, cfg.entropy_coef)
            if not np.isfinite(loss.value):
                skipped += 1
                logger.warning("PPO: skipped update with non-finite loss (minibatch of %s)", len(mb))
                tape.clear()
                continue
            grads = tape.backward(loss)
            tape.clear()
            if optimizer.step(net, grads):
                updates += 1
            for key, value in info.items():
                totals[key] = totals.get(key, 0.0) + value
    stats = {key: value / max(updates, 1) for key, value in totals.items()}
    stats.update(updates=updates, skipped_updates=skipped, rejected_updates=optimizer.rejected - rejected_before)
    return stats


# ---------------------- training ---------------------- #
@dataclass
class TrainResult:
    net: Mlp
    optimizer: AdamOptimizer
    space: ExtendedActionSpace
    best_success: float
    best_iteration: int
    curve: List[dict]
    frames: int

    def checkpoint_bytes(self) -> bytes:
        meta = {"best_success": self.best_success, "best_iteration": self.best_iteration, "frames": self.frames,
                "macros": [m.macro_id for m in self.space.macros]}
        return encode_checkpoint(self.net, self.optimizer, meta)


def evaluate(policy: Policy, cfg: RlConfig, episodes: int, seed: int,
             data: Optional[GameData] = None) -> Tuple[float, float]:
    """Success rate and mean return over fresh-seed episodes with sampled actions."""
    if episodes <= 0:
        return 0.0, 0.0
    worker = RolloutWorker(cfg, policy.space, data=data, seed=seed)
    rng = np.random.default_rng(seed + 1)
    while len(worker.stats.successes) < episodes:
        obs_vec = worker.observation_vector()
        action, _, _ = policy.sample(obs_vec, rng)
        worker.act(action)
    successes = worker.stats.successes[:episodes]
    returns = worker.stats.returns[:episodes]
    return float(np.mean(successes)), float(np.mean(returns))


def train(cfg: RlConfig, budget: int, data: Optional[GameData] = None, metrics_path=None,
          on_iteration: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run PPO until `budget` env frames are used; keep the best-evaluated network."""
    cfg.validate()
    if budget < cfg.rollout_length:
        raise ConfigError(f"frame budget {budget} is smaller than one rollout ({cfg.rollout_length})")
    data = data or load_game_data()
    env = MiniCraftEnv(data)
    space = build_action_space(env.cardinalities, cfg.macros)
    encoder = ObservationEncoder(data)
    net = Mlp.init(encoder.dim, cfg.hidden_dim, space.cardinalities, seed=cfg.seed)
    optimizer = AdamOptimizer(lr=cfg.learning_rate)
    policy = Policy(net, encoder, space)
    worker = RolloutWorker(cfg, space, env=env, seed=cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 7)
    update_rng = np.random.default_rng(cfg.seed + 11)
    eval_seed = cfg.seed + 1_000_003

    curve: List[dict] = []
    best_success, best_iteration, best_net = -1.0, 0, net.copy()
    iteration = 0
    logger.info("PPO: task=%s macros=%s budget=%s frames", cfg.task.task_id,
                [m.macro_id for m in cfg.macros], budget)
    while worker.frames < budget:
        iteration += 1
        seen = len(worker.stats.returns)
        transitions = worker.collect(policy, cfg.rollout_length, sample_rng)
        advantages, returns = gae(transitions, cfg.gamma, cfg.gae_lambda, worker.bootstrap_value(policy))
        stats = ppo_update(net, optimizer, transitions, advantages, returns, cfg, update_rng)
        finished = worker.stats.returns[seen:]
        record = {
            "iteration": iteration,
            "frames": worker.frames,
            "mean_return": float(np.mean(finished)) if finished else None,
            "train_success": float(np.mean(worker.stats.successes[seen:])) if finished else None,
            "success_rate": None,
            **{k: round(v, 6) if isinstance(v, float) else v for k, v in stats.items()},
        }
        last = worker.frames >= budget
        if iteration % max(cfg.eval_every, 1) == 0 or last:
            success, _ = evaluate(policy, cfg, cfg.eval_episodes, eval_seed, data)
            record["success_rate"] = success
            if success > best_success:
                best_success, best_iteration, best_net = success, iteration, net.copy()
        curve.append(record)
        logger.info("PPO iter %s: frames=%s return=%s success=%s", iteration, record["frames"],
                    record["mean_return"], record["success_rate"])
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if on_iteration is not None:
            on_iteration(record)

    return TrainResult(best_net, optimizer, space, max(best_success, 0.0), best_iteration, curve, worker.frames)
