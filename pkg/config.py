import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from errors import ConfigError


def read_env_file(path: Path) -> Dict[str, str]:
    """MINICRAFT_* overrides and backend API keys from a `.env` file.

    Lines are `NAME=value`, optionally prefixed with `export`; one pair of surrounding
    quotes is dropped. Blank lines, `#` comments and lines without `=` are skipped.
    """
    settings: Dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        entry = raw.strip()
        if entry.startswith("export "):
            entry = entry[len("export "):].lstrip()
        if not entry or entry.startswith("#") or "=" not in entry:
            continue
        name, value = (part.strip() for part in entry.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        if name:
            settings[name] = value
    return settings


def _load_local_env(path: Optional[Path] = None) -> None:
    """Export the project `.env` (or MINICRAFT_ENV_FILE); variables already set win."""
    env_file = path or Path(os.getenv("MINICRAFT_ENV_FILE", Path(__file__).with_name(".env")))
    if not env_file.is_file():
        return
    try:
        settings = read_env_file(env_file)
    except (OSError, UnicodeDecodeError):
        return
    for name, value in settings.items():
        os.environ.setdefault(name, value)


_load_local_env()

# --- Paths ---
ROOT_DIR = Path(__file__).resolve().parent
GAME_DATA_PATH = Path(os.getenv("MINICRAFT_DATA_PATH", ROOT_DIR / "minicraft_data.json"))
CODE_EXAMPLES_PATH = Path(os.getenv("MINICRAFT_CODE_EXAMPLES", ROOT_DIR / "code_examples.json"))
DEFAULT_OUTPUT_DIR = Path(os.getenv("MINICRAFT_OUTPUT_DIR", "runs"))

# --- Logging ---
LOG_LEVEL = os.getenv("MINICRAFT_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

# --- Chat backends ---
DEFAULT_CHAT_MODEL = os.getenv("MINICRAFT_CHAT_MODEL", "gpt-4")
DEFAULT_GEMINI_MODEL = "gemini-2.5-flash-lite"
HTTP_TIMEOUT = float(os.getenv("MINICRAFT_HTTP_TIMEOUT", "60"))
HTTP_RETRIES = int(os.getenv("MINICRAFT_HTTP_RETRIES", "2"))

GENERATION_CONFIG = {
    "temperature": 0.0,
    "topP": 1.0,
    "maxOutputTokens": 2048,
}

# --- Known ablation variants ---
ABLATION_VARIANTS = ("pure-rl", "pure-code", "zero-shot", "iter-2", "iter-2-no-SP", "iter-3")

# --- Exit codes (documented in files_overview.md) ---
EXIT_SOLVED = 0
EXIT_ERROR = 1
EXIT_BUDGET_EXHAUSTED = 2
EXIT_CONFIG_ERROR = 3
EXIT_INTERRUPTED = 4


@dataclass
class EnvSettings:
    biome: Optional[str] = None  # overrides the task preset's biome
    max_steps: Optional[int] = None


@dataclass
class BackendConfig:
    kind: str = "scripted"  # scripted | openai | gemini
    fixture: Optional[str] = None
    endpoint: Optional[str] = None
    model: str = DEFAULT_CHAT_MODEL
    api_key_env: Optional[str] = None
    timeout: float = HTTP_TIMEOUT


@dataclass
class RewardSettings:
    sparse: float = 1.0
    clip: float = 1.0
    distance: float = 1.0
    distance_mode: str = "auto"  # auto | combat | mining | off


@dataclass
class PpoSettings:
    frames: int = 150_000
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


@dataclass
class AgentSettings:
    outer_rounds: int = 3
    inner_attempts: int = 4
    format_retries: int = 3
    success_threshold: float = 0.5
    planning_tips: bool = True
    critic: str = "rule"  # rule | llm
    script_step_budget: int = 200
    eval_episodes: int = 20
    allow_learn: bool = True


@dataclass
class RunConfig:
    task: str
    seeds: List[int]
    output_dir: Path
    run_id: Optional[str] = None
    env: EnvSettings = field(default_factory=EnvSettings)
    backend: BackendConfig = field(default_factory=BackendConfig)
    reward: RewardSettings = field(default_factory=RewardSettings)
    ppo: PpoSettings = field(default_factory=PpoSettings)
    agents: AgentSettings = field(default_factory=AgentSettings)
    variants: List[str] = field(default_factory=list)
    source_path: Optional[Path] = None
    chain: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["output_dir"] = str(self.output_dir)
        data["source_path"] = str(self.source_path) if self.source_path else None
        return data

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        """Inverse of to_dict, used when resuming from a run directory."""
        try:
            return cls(
                task=raw["task"],
                seeds=list(raw["seeds"]),
                output_dir=Path(raw["output_dir"]),
                run_id=raw.get("run_id"),
                env=EnvSettings(**raw.get("env", {})),
                backend=BackendConfig(**raw.get("backend", {})),
                reward=RewardSettings(**raw.get("reward", {})),
                ppo=PpoSettings(**raw.get("ppo", {})),
                agents=AgentSettings(**raw.get("agents", {})),
                variants=list(raw.get("variants", [])),
                source_path=Path(raw["source_path"]) if raw.get("source_path") else None,
                chain=bool(raw.get("chain", False)),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"stored run config is incomplete: {e}") from e

    def task_spec(self, data=None):
        """The task preset with the `env` overrides applied."""
        from minicraft import get_task

        task = get_task(self.task, data)
        changes = {k: v for k, v in (("biome", self.env.biome), ("max_steps", self.env.max_steps)) if v is not None}
        return replace(task, **changes) if changes else task


def _section(raw: Dict[str, Any], name: str, cls):
    values = raw.get(name, {}) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad section '{name}': {e}") from e


def parse_run_config(raw: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    """Build a RunConfig from a decoded JSON document and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    base_dir = base_dir or Path.cwd()
    run = raw.get("run", {}) or {}
    if "task" not in run:
        raise ConfigError("run.task is required")

    backend = _section(raw, "backend", BackendConfig)
    if backend.fixture:
        fixture = Path(backend.fixture)
        backend.fixture = str(fixture if fixture.is_absolute() else (base_dir / fixture))

    output_dir = Path(run.get("output_dir", DEFAULT_OUTPUT_DIR))
    if not output_dir.is_absolute():
        output_dir = base_dir / output_dir

    cfg = RunConfig(
        task=run["task"],
        seeds=list(run.get("seeds", [0])),
        output_dir=output_dir,
        run_id=run.get("run_id"),
        env=_section(raw, "env", EnvSettings),
        backend=backend,
        reward=_section(raw, "reward", RewardSettings),
        ppo=_section(raw, "ppo", PpoSettings),
        agents=_section(raw, "agents", AgentSettings),
        variants=list((raw.get("ablation", {}) or {}).get("variants", [])),
        chain=bool(run.get("chain", False)),
    )
    validate_run_config(cfg)
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    cfg = parse_run_config(raw, base_dir=path.resolve().parent)
    cfg.source_path = path.resolve()
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    from minicraft import load_game_data

    data = load_game_data()
    if cfg.task not in data.tasks:
        raise ConfigError(f"unknown task '{cfg.task}'")
    if cfg.env.biome is not None and cfg.env.biome not in data.biomes:
        raise ConfigError(f"unknown biome '{cfg.env.biome}'")
    if cfg.env.max_steps is not None and cfg.env.max_steps < 1:
        raise ConfigError("env.max_steps must be >= 1")
    if not cfg.seeds:
        raise ConfigError("run.seeds must not be empty")
    if any(not isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("run.seeds must be integers")

    b = cfg.backend
    if b.kind == "scripted":
        if not b.fixture:
            raise ConfigError("scripted backend needs backend.fixture")
        if not Path(b.fixture).exists():
            raise ConfigError(f"fixture file not found: {b.fixture}")
    elif b.kind in ("openai", "gemini"):
        if not b.api_key_env:
            raise ConfigError("HTTP backends need backend.api_key_env (the variable name, not the key)")
        if b.kind == "openai" and not b.endpoint:
            raise ConfigError("openai backend needs backend.endpoint")
    else:
        raise ConfigError(f"unknown backend kind '{b.kind}'")

    p = cfg.ppo
    if not 0 < p.gamma <= 1:
        raise ConfigError("ppo.gamma must be in (0, 1]")
    if not 0 <= p.gae_lambda <= 1:
        raise ConfigError("ppo.gae_lambda must be in [0, 1]")
    if p.clip_epsilon <= 0:
        raise ConfigError("ppo.clip_epsilon must be positive")
    if p.rollout_length <= 0 or p.minibatch_size <= 0 or p.epochs <= 0:
        raise ConfigError("ppo.rollout_length, minibatch_size and epochs must be positive")

    a = cfg.agents
    if a.outer_rounds < 1 or a.inner_attempts < 1:
        raise ConfigError("agents.outer_rounds and agents.inner_attempts must be >= 1")
    if a.critic not in ("rule", "llm"):
        raise ConfigError(f"unknown critic '{a.critic}'")
    if cfg.reward.distance_mode not in ("auto", "combat", "mining", "off"):
        raise ConfigError(f"unknown reward.distance_mode '{cfg.reward.distance_mode}'")

    unknown = [v for v in cfg.variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variant(s): {', '.join(unknown)}")
