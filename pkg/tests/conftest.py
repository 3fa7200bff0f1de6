from pathlib import Path
from types import SimpleNamespace

import pytest

from backends import ScriptedBackend
from config import AgentSettings, PpoSettings
from minicraft import MiniCraftEnv, load_game_data
from prompts import ContextBundle

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


@pytest.fixture(scope="session")
def data():
    return load_game_data()


@pytest.fixture(scope="session")
def ctx(data):
    return ContextBundle.from_env(MiniCraftEnv(data))


@pytest.fixture
def scripted():
    """Fresh replay backend for a fixture under fixtures/."""
    def make(name: str) -> ScriptedBackend:
        return ScriptedBackend.from_file(FIXTURES / f"{name}.json")
    return make


def fake_trainer(cfg, budget, data=None, on_iteration=None, **_):
    """Stands in for PPO: macros help most, a coded prefix helps some, bare RL gets nothing."""
    success = 0.9 if cfg.macros else (0.3 if cfg.prefix else 0.0)
    curve = []
    for i, frames in enumerate((budget // 2, budget), 1):
        record = {"iteration": i, "frames": frames, "success_rate": round(success * i / 2, 6)}
        curve.append(record)
        if on_iteration is not None:
            on_iteration(record)
    return SimpleNamespace(best_success=success, curve=curve, frames=budget)


@pytest.fixture
def trainer():
    return fake_trainer


@pytest.fixture
def agent_settings():
    return AgentSettings(outer_rounds=3, inner_attempts=4, critic="llm", eval_episodes=3)


@pytest.fixture
def ppo_settings():
    return PpoSettings(frames=2048, rollout_length=64, minibatch_size=32, epochs=1, eval_episodes=2, eval_every=1,
                       hidden_dim=16)
