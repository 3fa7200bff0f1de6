# state.py - run directories, event logs, checkpoints and run reports.
# Responsibilities:
#   - Create one directory per run atomically and guard it with a PID lock file.
#   - Append line-delimited events (seq, kind, payload, ts) and RL metrics.
#   - Store plain-text artifacts (plans, scripts, critiques) and binary policy checkpoints.
#   - Save/restore the driver checkpoint used by `run --resume`.
#   - Persist the final RunReport.

import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import psutil

from errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
REPORT_FILE = "report.json"
LOCK_FILE = "run.lock"
LOG_FILE = "run.log"
ARTIFACTS_DIR = "artifacts"


# ---------------------- helpers ---------------------- #
def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_json(path: Path, default=None):
    if not path.exists():
        return default
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def _atomic_write(path: Path, content: Union[str, bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _save_json(path: Path, data: Any) -> None:
    _atomic_write(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def strip_timestamps(events: List[dict]) -> List[dict]:
    return [{k: v for k, v in e.items() if k != "ts"} for e in events]


# ---------------------- report ---------------------- #
@dataclass
class RunReport:
    run_id: str
    task: str
    status: str  # solved | budget-exhausted
    final_success: float
    per_seed: Dict[str, float]
    rounds: List[dict]
    frames: int
    wall_clock: float
    dead_loop_ratio: float
    config: Dict[str, Any] = field(default_factory=dict)
    variant: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunReport":
        return cls(**raw)

    def summary(self) -> str:
        lines = [
            f"run {self.run_id} ({self.task}{', ' + self.variant if self.variant else ''}): {self.status}",
            f"final success {self.final_success:.3f} over seeds "
            + ", ".join(f"{k}={v:.3f}" for k, v in sorted(self.per_seed.items())),
            f"RL frames {self.frames}, dead-loop ratio {self.dead_loop_ratio:.3f}, {self.wall_clock:.1f}s",
        ]
        for r in self.rounds:
            lines.append(f"  round {r['round']}: success {r['success']:.3f}, frames {r['frames']}")
        return "\n".join(lines)


# ---------------------- run store ---------------------- #
def _pid_alive(pid: int) -> bool:
    if pid == os.getpid():
        return True
    try:
        return psutil.pid_exists(pid) and psutil.Process(pid).status() != psutil.STATUS_ZOMBIE
    except psutil.Error:
        return False


class RunStore:
    """One run directory; every write is either an append or an atomic replace."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_id = self.run_dir.name
        self._seq = len(read_jsonl(self.events_path))
        self._locked = False

    # --- layout ---
    @property
    def events_path(self) -> Path:
        return self.run_dir / EVENTS_FILE

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_FILE

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / CHECKPOINT_FILE

    @property
    def report_path(self) -> Path:
        return self.run_dir / REPORT_FILE

    @property
    def log_path(self) -> Path:
        return self.run_dir / LOG_FILE

    # --- creation ---
    @classmethod
    def create(cls, output_dir, run_id: str, config: Dict[str, Any]) -> "RunStore":
        """Build the directory under a temporary name, then rename it into place."""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        final = output_dir / run_id
        if final.exists():
            raise ConfigError(f"run directory already exists: {final}")
        tmp = Path(tempfile.mkdtemp(dir=output_dir, prefix=f".{run_id}."))
        try:
            (tmp / ARTIFACTS_DIR).mkdir()
            _save_json(tmp / CONFIG_FILE, config)
            os.rename(tmp, final)
        except OSError as e:
            shutil.rmtree(tmp, ignore_errors=True)
            raise ConfigError(f"cannot create run directory {final}: {e}") from e
        logger.info("Created run directory %s", final)
        return cls(final)

    @classmethod
    def open(cls, run_dir) -> "RunStore":
        run_dir = Path(run_dir)
        if not (run_dir / CONFIG_FILE).exists():
            raise ConfigError(f"{run_dir} is not a run directory")
        return cls(run_dir)

    @staticmethod
    def default_run_id(task: str) -> str:
        return f"{task}-{datetime.now(timezone.utc).strftime('%Y%m%d-%H%M%S')}-{os.getpid()}"

    def config(self) -> Dict[str, Any]:
        return _load_json(self.run_dir / CONFIG_FILE, {})

    # --- lock ---
    def acquire_lock(self) -> None:
        """Refuse to share the directory with a live process; stale locks are replaced."""
        lock = self.run_dir / LOCK_FILE
        if lock.exists():
            pid_str = lock.read_text(encoding="utf-8").strip()
            if pid_str.isdigit() and int(pid_str) != os.getpid() and _pid_alive(int(pid_str)):
                raise ConfigError(f"run {self.run_id} is in use by pid {pid_str}")
            logger.warning("Replacing stale lock of run %s (pid %s)", self.run_id, pid_str or "?")
        _atomic_write(lock, str(os.getpid()))
        self._locked = True

    def release_lock(self) -> None:
        if not self._locked:
            return
        try:
            (self.run_dir / LOCK_FILE).unlink()
        except FileNotFoundError:
            pass
        self._locked = False

    # --- events and metrics ---
    def emit(self, kind: str, payload: Dict[str, Any]) -> None:
        self._seq += 1
        record = {"seq": self._seq, "kind": kind, **payload, "ts": _now()}
        with open(self.events_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def event_count(self) -> int:
        return self._seq

    def events(self) -> List[dict]:
        return read_jsonl(self.events_path)

    def rewind(self, seq: int) -> None:
        """Drop events after `seq`, left over from an interrupted round."""
        kept = [e for e in self.events() if e["seq"] <= seq]
        _atomic_write(self.events_path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in kept))
        self._seq = len(kept)
        if self.metrics_path.exists():
            done = {e["round"] for e in kept if e["kind"] == "round_end"}
            metrics = [m for m in read_jsonl(self.metrics_path) if m.get("round") in done]
            _atomic_write(self.metrics_path, "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))

    def append_metric(self, record: Dict[str, Any]) -> None:
        with open(self.metrics_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def metrics(self) -> List[dict]:
        return read_jsonl(self.metrics_path)

    # --- artifacts, checkpoints, report ---
    def write_artifact(self, name: str, content: Union[str, bytes]) -> Path:
        path = self.run_dir / ARTIFACTS_DIR / name
        _atomic_write(path, content)
        return path

    def save_checkpoint(self, state: Dict[str, Any]) -> Path:
        _save_json(self.checkpoint_path, state)
        return self.checkpoint_path

    def load_checkpoint(self) -> Optional[Dict[str, Any]]:
        return _load_json(self.checkpoint_path)

    def save_report(self, report: RunReport) -> Path:
        _save_json(self.report_path, report.to_dict())
        return self.report_path

    def load_report(self) -> Optional[RunReport]:
        raw = _load_json(self.report_path)
        return RunReport.from_dict(raw) if raw else None

    def remove(self) -> None:
        self.release_lock()
        shutil.rmtree(self.run_dir, ignore_errors=True)
