# rewards.py - dense reward signals for the gridworld.
# Similarity reward: bag-of-names features of recent observations vs. 32 task descriptors.
# Distance rewards: combat (approach the target) and mining (stay close to the block).

import itertools
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RewardSettings
from errors import ConfigError, ContractViolation
from minicraft import AIR, CELL_KINDS, MOB_KINDS, NO_ENTITY, OUT_OF_BOUNDS, GameData, Observation, TaskSpec

logger = logging.getLogger(__name__)

NUM_PROMPTS = 32
NUM_NEGATIVES = NUM_PROMPTS - 1
WINDOW_SIZE = 16
MINING_CLOSE = 1.5
MINING_CLOSE_REWARD = 2.0
MINING_LOST_REWARD = -2.0


def build_vocabulary(data: GameData) -> Tuple[str, ...]:
    names = set(CELL_KINDS) | set(MOB_KINDS) | set(data.items)
    names.discard(AIR)
    return tuple(sorted(names))


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; a zero vector on either side gives 0."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def feature_embed(obs: Observation, vocab: Sequence[str], prev_obs: Optional[Observation] = None) -> np.ndarray:
    """Counts of visible names plus positive inventory deltas, L2-normalized.

    An observation with nothing visible and no inventory gain embeds to the zero vector.
    """
    index = {name: i for i, name in enumerate(vocab)}
    vec = np.zeros(len(vocab))
    for ray in obs.rays:
        if ray.block_name in index:
            vec[index[ray.block_name]] += 1.0
        if ray.entity_name != NO_ENTITY and ray.entity_name in index:
            vec[index[ray.entity_name]] += 1.0
    for row in obs.voxels:
        for name in row:
            if name not in (AIR, OUT_OF_BOUNDS) and name in index:
                vec[index[name]] += 1.0
    if prev_obs is not None:
        for item, count in obs.inventory.items():
            gained = count - prev_obs.inventory.get(item, 0)
            if gained > 0 and item in index:
                vec[index[item]] += float(gained)
    return _normalize(vec)


@dataclass(frozen=True)
class PromptDescriptor:
    text: str
    names: Tuple[str, ...]
    vector: np.ndarray = field(compare=False, repr=False)

    @classmethod
    def from_names(cls, text: str, names: Sequence[str], vocab: Sequence[str]) -> "PromptDescriptor":
        index = {name: i for i, name in enumerate(vocab)}
        vec = np.zeros(len(vocab))
        for name in names:
            vec[index[name]] += 1.0
        return cls(text=text, names=tuple(names), vector=_normalize(vec))

    @classmethod
    def from_text(cls, text: str, vocab: Sequence[str]) -> "PromptDescriptor":
        """Embed the vocabulary names a prompt mentions.

        A word matches a name exactly, or the first part of an underscored name
        when that part is not a name of its own ("milk" matches milk_bucket).
        """
        words = re.findall(r"[a-z]+", text.lower().replace("_", " "))
        joined = "_".join(words)
        vocab_set = set(vocab)
        names: List[str] = []
        for name in vocab:
            head = name.split("_")[0]
            if name in words:
                names.append(name)
            elif "_" in name and (name in joined or (head in words and head not in vocab_set)):
                names.append(name)
        return cls.from_names(text, names, vocab)


def task_descriptor(task: TaskSpec, data: GameData, vocab: Sequence[str]) -> PromptDescriptor:
    base = PromptDescriptor.from_text(task.prompt or task.target_item, vocab)
    names = list(base.names)
    if task.target_item not in names:
        names.append(task.target_item)
    source = data.source_for(task.target_item)
    if source and source.source not in names:
        names.append(source.source)
    return PromptDescriptor.from_names(task.prompt, names, vocab)


def build_negatives(task: TaskSpec, data: GameData, vocab: Sequence[str]) -> List[PromptDescriptor]:
    """Descriptors of the other registered tasks, padded with synthetic distractors to 31."""
    negatives = [
        task_descriptor(other, data, vocab)
        for task_id, other in sorted(data.tasks.items())
        if task_id != task.task_id
    ][:NUM_NEGATIVES]
    positive = set(task_descriptor(task, data, vocab).names)
    spare = [name for name in vocab if name not in positive]
    candidates = itertools.chain(
        ((name,) for name in spare),
        itertools.combinations(spare, 2),
    )
    for names in candidates:
        if len(negatives) >= NUM_NEGATIVES:
            break
        negatives.append(PromptDescriptor.from_names("distractor: " + " ".join(names), names, vocab))
    return negatives


def softmax(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    e = np.exp(v - np.max(v))
    return e / e.sum()


def reward_from_similarities(similarities: Sequence[float]) -> float:
    """max{p - 1/32, 0} with p the softmax weight of entry 0 (the positive prompt)."""
    if len(similarities) != NUM_PROMPTS:
        raise ConfigError(f"expected {NUM_PROMPTS} similarities, got {len(similarities)}")
    p = float(softmax(similarities)[0])
    return max(p - 1.0 / NUM_PROMPTS, 0.0)


class SimilarityModel:
    def __init__(self, positive: PromptDescriptor, negatives: Sequence[PromptDescriptor], window: int = WINDOW_SIZE):
        if len(negatives) != NUM_NEGATIVES:
            raise ConfigError(f"similarity model needs exactly {NUM_NEGATIVES} negative prompts, got {len(negatives)}")
        self.positive = positive
        self.negatives = list(negatives)
        self.window: deque = deque(maxlen=window)
        self._prompts = np.stack([positive.vector] + [n.vector for n in self.negatives])

    @classmethod
    def for_task(cls, task: TaskSpec, data: GameData) -> "SimilarityModel":
        vocab = build_vocabulary(data)
        return cls(task_descriptor(task, data, vocab), build_negatives(task, data, vocab))

    def push(self, features: np.ndarray) -> None:
        self.window.append(np.asarray(features, dtype=float))

    def reset(self) -> None:
        self.window.clear()

    def pooled(self) -> np.ndarray:
        return np.mean(np.stack(list(self.window)), axis=0)

    def similarities(self) -> List[float]:
        pooled = self.pooled()
        return [cosine(pooled, p) for p in self._prompts]


def clip_reward(model: SimilarityModel) -> float:
    if not model.window:
        raise ContractViolation("clip_reward needs at least one observation in the window")
    return reward_from_similarities(model.similarities())


# ---------------------- distance rewards ---------------------- #
@dataclass
class DistanceTracker:
    mode: str = "combat"  # combat | mining
    history_min: Optional[float] = None
    last_distance: Optional[float] = None

    def start(self, d0: float) -> None:
        _check_distance(d0)
        self.history_min = d0
        self.last_distance = d0


def _check_distance(d: float) -> None:
    if math.isnan(d) or d < 0:
        raise ContractViolation(f"distance must be >= 0 or infinity, got {d}")


def distance_reward_combat(tracker: DistanceTracker, d_t: float) -> float:
    """max{min_{t'<t} d_t' - d_t, 0}; updates the running minimum."""
    _check_distance(d_t)
    if tracker.history_min is None or math.isinf(tracker.history_min):
        tracker.history_min = d_t
        tracker.last_distance = d_t
        return 0.0
    reward = 0.0 if math.isinf(d_t) else max(tracker.history_min - d_t, 0.0)
    tracker.history_min = min(tracker.history_min, d_t)
    tracker.last_distance = d_t
    return reward


def distance_reward_mining(tracker: DistanceTracker, d_t: float) -> float:
    _check_distance(d_t)
    last = tracker.last_distance
    if math.isinf(d_t):
        reward = MINING_LOST_REWARD
    elif d_t < MINING_CLOSE:
        reward = MINING_CLOSE_REWARD
    elif last is None or math.isinf(last):
        reward = 0.0
    else:
        reward = last - d_t
    tracker.last_distance = d_t
    if tracker.history_min is None or d_t < tracker.history_min:
        tracker.history_min = d_t
    return reward


# ---------------------- shaping ---------------------- #
def distance_target(task: TaskSpec, data: GameData) -> Optional[str]:
    """Block or mob the agent should approach first for this task."""
    seen = set()
    item = task.target_item
    while item not in seen:
        seen.add(item)
        source = data.source_for(item)
        if source is not None:
            return source.source
        recipe = data.lookup_recipe(item)
        if recipe is None or not recipe.inputs:
            return None
        missing = [name for name, _ in recipe.inputs if name not in task.initial_inventory_dict()]
        item = (missing or [recipe.inputs[0][0]])[0]
    return None


class RewardShaper:
    """Weighted sum of sparse success, similarity and distance rewards for one episode."""

    def __init__(self, task: TaskSpec, data: GameData, settings: Optional[RewardSettings] = None):
        self.task = task
        self.data = data
        self.settings = settings or RewardSettings()
        self.vocab = build_vocabulary(data)
        self.model = SimilarityModel.for_task(task, data) if self.settings.clip else None
        self.target = distance_target(task, data)
        mode = self.settings.distance_mode
        if mode == "auto":
            mode = "combat" if self.target in MOB_KINDS else "mining"
        if self.target is None or not self.settings.distance:
            mode = "off"
        self.mode = mode
        self.tracker = DistanceTracker(mode=mode if mode != "off" else "combat")
        self._prev: Optional[Observation] = None

    def reset(self, obs: Observation) -> None:
        self._prev = obs
        if self.model is not None:
            self.model.reset()
            self.model.push(feature_embed(obs, self.vocab))
        if self.mode != "off":
            self.tracker = DistanceTracker(mode=self.mode)
            self.tracker.start(obs.nearest(self.target)[0])

    def step(self, obs: Observation, success: bool) -> Tuple[float, Dict[str, float]]:
        parts = {"sparse": 0.0, "clip": 0.0, "distance": 0.0}
        if success:
            parts["sparse"] = 1.0
        if self.model is not None:
            self.model.push(feature_embed(obs, self.vocab, self._prev))
            parts["clip"] = clip_reward(self.model)
        if self.mode == "combat":
            parts["distance"] = distance_reward_combat(self.tracker, obs.nearest(self.target)[0])
        elif self.mode == "mining":
            parts["distance"] = distance_reward_mining(self.tracker, obs.nearest(self.target)[0])
        self._prev = obs
        s = self.settings
        total = s.sparse * parts["sparse"] + s.clip * parts["clip"] + s.distance * parts["distance"]
        return total, parts
