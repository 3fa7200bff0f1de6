"""Slow, fast and critic agents and the two-loop driver.

The outer loop asks the slow agent for a plan of sub-actions tagged code, macro or learn.
The inner loop asks the fast agent for a script per coded sub-action, runs it, and has the
critic judge it until it is accepted or the attempts run out. Sequential scripts become
the episode prefix, macro scripts join the RL action space, and the remaining `learn`
sub-action is trained with PPO. Critiques of every round are appended to the slow prompt.
"""

import copy
import dataclasses
import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import prompts
from actionscript import (
    STATUS_CAP,
    STATUS_FAILURE,
    STATUS_FAULT,
    STATUS_SUCCESS,
    TARGETS,
    MacroAction,
    Script,
    ScriptOutcome,
    compile_macro,
    interpret,
    parse,
)
from backends import ChatBackend
from config import AgentSettings, PpoSettings, RewardSettings
from errors import (
    AgentResponseError,
    BackendError,
    ContractViolation,
    MacroError,
    RolloutError,
    RunInterrupted,
    ScriptError,
)
from minicraft import GameData, MiniCraftEnv, Observation, TaskSpec, load_game_data
from ppo import RlConfig, build_action_space, train
from rewards import PromptDescriptor, build_vocabulary
from state import RunReport

logger = logging.getLogger(__name__)

MODES = ("code", "macro", "learn")
VERDICT_SUCCESS = "success"
VERDICT_FAILURE = "failure"
VERDICT_TOO_HARD = "too-hard-to-code"

NAV_WORDS = {"find", "navigate", "approach", "go", "walk", "move", "reach", "locate"}
ATTACK_WORDS = {"attack", "hit", "cut", "chop", "mine", "break", "punch"}
NAV_CLOSE = 1.5

EVAL_SEED_STRIDE = 10_007


# --- Plans and critiques -------------------------------------------------------

@dataclass(frozen=True)
class SubAction:
    description: str
    mode: str
    explain: str = ""

    def key(self) -> str:
        return " ".join(self.description.lower().split())

    def to_dict(self) -> dict:
        return {"description": self.description, "mode": self.mode, "explain": self.explain}


@dataclass(frozen=True)
class SubActionPlan:
    actions: Tuple[SubAction, ...]
    explain: str = ""

    def learn_action(self) -> Optional[SubAction]:
        return next((a for a in self.actions if a.mode == "learn"), None)

    def render(self) -> str:
        lines = [f"Explain: {self.explain}", "Actions can be coded:"]
        for i, a in enumerate(self.actions, 1):
            lines.append(f"{i}) {a.description} [{a.mode}]" + (f" - {a.explain}" if a.explain else ""))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"explain": self.explain, "actions": [a.to_dict() for a in self.actions]}


@dataclass
class CritiqueRecord:
    round: int
    sub_action: str
    mode: str
    verdict: str
    rationale: str
    before: str = ""
    after: str = ""

    def render(self) -> str:
        return f"[round {self.round}] {self.sub_action} ({self.mode}): {self.verdict} - {self.rationale}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "CritiqueRecord":
        return cls(**raw)


@dataclass
class AttemptLog:
    attempt: int
    source: str
    diagnostic: Optional[str] = None
    status: Optional[str] = None
    verdict: Optional[str] = None
    rationale: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SubActionResult:
    sub_action: SubAction
    verdict: str
    attempts: List[AttemptLog]
    critique: CritiqueRecord
    script: Optional[Script] = None
    source: Optional[str] = None
    macro: Optional[MacroAction] = None
    outcome: Optional[ScriptOutcome] = None

    @property
    def accepted(self) -> bool:
        return self.verdict == VERDICT_SUCCESS

    def executed(self) -> int:
        return sum(1 for a in self.attempts if a.status is not None)

    def capped(self) -> int:
        return sum(1 for a in self.attempts if a.status == STATUS_CAP)


@dataclass
class IterationState:
    outer_round: int = 0
    critiques: List[CritiqueRecord] = field(default_factory=list)
    rounds: List[dict] = field(default_factory=list)
    status: str = "running"  # running | solved | budget-exhausted
    best_success: float = 0.0
    best_round: int = 0
    frames: int = 0

    def append_critiques(self, records: Sequence[CritiqueRecord]) -> None:
        self.critiques.extend(records)

    def too_hard(self) -> set:
        return {" ".join(c.sub_action.lower().split()) for c in self.critiques if c.verdict == VERDICT_TOO_HARD}

    def to_dict(self) -> dict:
        return {
            "outer_round": self.outer_round,
            "critiques": [c.to_dict() for c in self.critiques],
            "rounds": copy.deepcopy(self.rounds),
            "status": self.status,
            "best_success": self.best_success,
            "best_round": self.best_round,
            "frames": self.frames,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "IterationState":
        return cls(
            outer_round=raw["outer_round"],
            critiques=[CritiqueRecord.from_dict(c) for c in raw.get("critiques", [])],
            rounds=list(raw.get("rounds", [])),
            status=raw.get("status", "running"),
            best_success=raw.get("best_success", 0.0),
            best_round=raw.get("best_round", 0),
            frames=raw.get("frames", 0),
        )


@dataclass
class AgentBackends:
    slow: ChatBackend
    fast: ChatBackend
    critic: Optional[ChatBackend] = None
    planner: Optional[ChatBackend] = None

    @classmethod
    def shared(cls, backend: ChatBackend) -> "AgentBackends":
        return cls(slow=backend, fast=backend, critic=backend, planner=backend)

    def by_role(self) -> Dict[str, ChatBackend]:
        roles = {"slow": self.slow, "fast": self.fast, "critic": self.critic, "planner": self.planner}
        return {k: v for k, v in roles.items() if v is not None}


# --- Response parsing ------------------------------------------------------------

_PLAN_HEADER = re.compile(r"actions can be coded\s*:", re.IGNORECASE)
_PLAN_LINE = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")
_PLAN_TAG = re.compile(r"^(.*?)\s*\[(code|macro|learn)\]\s*(?:[-:]\s*(.*))?$", re.IGNORECASE)
_EXPLAIN = re.compile(r"explain[^:\n]*:\s*(.*)", re.IGNORECASE | re.DOTALL)
_CODE_BLOCK = re.compile(r"```(?:actionscript)?[ \t]*\n(.*?)```", re.DOTALL)
_VERDICT = re.compile(r"verdict\s*:\s*(success|failure)", re.IGNORECASE)
_RATIONALE = re.compile(r"rationale\s*:\s*(.*)", re.IGNORECASE | re.DOTALL)


def parse_plan(text: str) -> SubActionPlan:
    match = _PLAN_HEADER.search(text or "")
    if match is None:
        raise AgentResponseError("reply has no 'Actions can be coded:' section")
    head, body = text[: match.start()], text[match.end():]
    explain = ""
    m = _EXPLAIN.search(head)
    if m:
        explain = " ".join(m.group(1).split())
    actions = []
    for line in body.splitlines():
        numbered = _PLAN_LINE.match(line)
        if not numbered:
            continue
        tagged = _PLAN_TAG.match(numbered.group(2))
        if not tagged or not tagged.group(1).strip():
            raise AgentResponseError(f"sub-action {numbered.group(1)} has no [code|macro|learn] tag")
        actions.append(SubAction(tagged.group(1).strip(), tagged.group(2).lower(), (tagged.group(3) or "").strip()))
    if not actions:
        raise AgentResponseError("plan lists no sub-actions")
    if sum(1 for a in actions if a.mode == "learn") > 1:
        raise AgentResponseError("plan marks more than one sub-action as learn; a single network learns one")
    return SubActionPlan(tuple(actions), explain)


def extract_code(text: str) -> str:
    m = _CODE_BLOCK.search(text or "")
    if m is None:
        raise AgentResponseError("reply has no ```actionscript code block")
    return m.group(1).strip() + "\n"


def _with_reminder(messages: List[Dict[str, str]], reason: str) -> List[Dict[str, str]]:
    patched = [dict(m) for m in messages]
    patched[-1]["content"] += (
        f"\n\nYour last reply could not be used: {reason}. "
        "You should only respond in the format as described."
    )
    return patched


# --- Observation summaries ------------------------------------------------------

def describe_observation(obs: Observation) -> str:
    seen = []
    for name in TARGETS:
        d, _ = obs.nearest(name)
        if not math.isinf(d):
            seen.append(f"{name}@{d:.1f}")
    inventory = ", ".join(f"{k} x{v}" for k, v in sorted(obs.inventory.items())) or "empty"
    return (
        f"pos={obs.pos} yaw={obs.yaw} front={obs.front_block()} "
        f"visible=[{', '.join(seen)}] inventory=[{inventory}]"
    )


def task_context(task: TaskSpec) -> str:
    inventory = ", ".join(f"{k} x{v}" for k, v in task.initial_inventory) or "empty"
    return (
        f"obtain {task.target_item} x{task.target_count} within {task.max_steps} steps in the "
        f"{task.biome} biome; starting inventory: {inventory}"
    )


# --- Agents ---------------------------------------------------------------------

def slow_plan(task: TaskSpec, ctx: prompts.ContextBundle, state: IterationState, backend: ChatBackend,
              settings: Optional[AgentSettings] = None) -> SubActionPlan:
    """Ask the slow agent for a plan; malformed replies are retried with a format reminder."""
    settings = settings or AgentSettings()
    too_hard = state.too_hard()
    tips = settings.planning_tips and bool(too_hard)
    messages = prompts.render_slow(
        task.prompt or task.task_id, task_context(task), [c.render() for c in state.critiques], ctx, tips
    )
    reason = None
    for attempt in range(settings.format_retries + 1):
        reply = backend.complete(messages if reason is None else _with_reminder(messages, reason))
        try:
            plan = parse_plan(reply)
            repeated = [a.description for a in plan.actions if a.mode != "learn" and a.key() in too_hard]
            if repeated:
                raise AgentResponseError(
                    f"'{repeated[0]}' was too difficult to code before; subdivide it or mark it learn"
                )
            return plan
        except AgentResponseError as e:
            reason = str(e)
            logger.warning("Slow agent reply %s rejected: %s", attempt + 1, reason)
    raise AgentResponseError(f"slow agent gave no usable plan after {settings.format_retries + 1} replies: {reason}")


def fast_code(sub_action: SubAction, ctx: prompts.ContextBundle, context: str, backend: ChatBackend,
              last_code: str = "", execution_error: str = "", critique: str = "",
              format_retries: int = 3) -> str:
    """Ask the fast agent for the script of one coded sub-action."""
    if not sub_action.description.strip():
        raise ContractViolation("fast_code needs a non-empty sub-action description")
    if sub_action.mode not in ("code", "macro"):
        raise ContractViolation(f"fast_code only writes code or macro sub-actions, got '{sub_action.mode}'")
    messages = prompts.render_fast(sub_action.description, context, ctx, last_code, execution_error, critique)
    reason = None
    for attempt in range(format_retries + 1):
        reply = backend.complete(messages if reason is None else _with_reminder(messages, reason))
        try:
            return extract_code(reply)
        except AgentResponseError as e:
            reason = str(e)
            logger.warning("Fast agent reply %s rejected: %s", attempt + 1, reason)
    raise AgentResponseError(f"fast agent gave no code block after {format_retries + 1} replies")


class RuleCritic:
    """Judges a script by inventory, distance and action deltas against the intent words."""

    def __init__(self, data: Optional[GameData] = None):
        self.data = data or load_game_data()
        self.vocab = build_vocabulary(self.data)
        self.items = set(self.data.items)

    def judge(self, sub_action: SubAction, outcome: ScriptOutcome, round_no: int = 0) -> CritiqueRecord:
        verdict, rationale = self._verdict(sub_action, outcome)
        return CritiqueRecord(
            round=round_no,
            sub_action=sub_action.description,
            mode=sub_action.mode,
            verdict=verdict,
            rationale=rationale,
            before=describe_observation(outcome.obs_before),
            after=describe_observation(outcome.obs_after),
        )

    def _verdict(self, sub_action: SubAction, outcome: ScriptOutcome) -> Tuple[str, str]:
        if outcome.status == STATUS_FAULT:
            return VERDICT_FAILURE, f"runtime fault: {outcome.fault}"
        if outcome.success:
            return VERDICT_SUCCESS, "task target reached"
        if outcome.status == STATUS_FAILURE:
            return VERDICT_FAILURE, "script ended in failure"

        before, after = outcome.obs_before, outcome.obs_after
        names = PromptDescriptor.from_text(sub_action.description, self.vocab).names
        items = [n for n in names if n in self.items]
        targets = [n for n in names if n in TARGETS]
        words = set(re.findall(r"[a-z]+", sub_action.description.lower()))

        for item in items:
            gained = after.count(item) - before.count(item)
            if gained > 0:
                return VERDICT_SUCCESS, f"{item} +{gained}"

        if words & NAV_WORDS and targets:
            for target in targets:
                d0, d1 = before.nearest(target)[0], after.nearest(target)[0]
                if not math.isinf(d1) and (d1 <= NAV_CLOSE or d1 < d0):
                    return VERDICT_SUCCESS, f"nearest {target} distance {_fmt_dist(d0)} -> {_fmt_dist(d1)}"
            return VERDICT_FAILURE, f"did not get closer to {targets[0]} ({outcome.status})"

        if items:
            return VERDICT_FAILURE, f"no {items[0]} gained ({outcome.status}, {outcome.steps_used} steps)"

        if words & ATTACK_WORDS:
            wanted = int(next(iter(re.findall(r"\d+", sub_action.description)), 1))
            attacks = sum(1 for entry in outcome.trace if entry["op"] == "attack")
            if outcome.status == STATUS_SUCCESS and attacks >= wanted:
                return VERDICT_SUCCESS, f"{attacks} attacks issued"
            return VERDICT_FAILURE, f"{attacks} of {wanted} attacks issued ({outcome.status})"

        if outcome.status == STATUS_SUCCESS and outcome.steps_used > 0:
            return VERDICT_SUCCESS, "script finished"
        return VERDICT_FAILURE, f"no progress ({outcome.status})"


def _fmt_dist(d: float) -> str:
    return "inf" if math.isinf(d) else f"{d:.1f}"


class LlmCritic:
    """Asks the critic backend; an unreadable reply counts as failure."""

    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def judge(self, sub_action: SubAction, outcome: ScriptOutcome, round_no: int = 0) -> CritiqueRecord:
        before, after = describe_observation(outcome.obs_before), describe_observation(outcome.obs_after)
        reply = self.backend.complete(
            prompts.render_critic(sub_action.description, outcome.status, outcome.steps_used, before, after)
        )
        m = _VERDICT.search(reply or "")
        if m is None:
            logger.warning("Critic reply has no verdict: %r", (reply or "")[:80])
            verdict, rationale = VERDICT_FAILURE, "unreadable critic reply"
        else:
            verdict = m.group(1).lower()
            r = _RATIONALE.search(reply)
            rationale = " ".join(r.group(1).split()) if r else ""
        if outcome.status == STATUS_FAULT:
            verdict, rationale = VERDICT_FAILURE, f"runtime fault: {outcome.fault}"
        return CritiqueRecord(round_no, sub_action.description, sub_action.mode, verdict, rationale, before, after)


def critic_judge(sub_action: SubAction, outcome: ScriptOutcome, backend: Optional[ChatBackend] = None,
                 data: Optional[GameData] = None, round_no: int = 0) -> CritiqueRecord:
    critic = LlmCritic(backend) if backend is not None else RuleCritic(data)
    return critic.judge(sub_action, outcome, round_no)


# --- Execution helpers ------------------------------------------------------------

def _finished_outcome(env: MiniCraftEnv) -> ScriptOutcome:
    obs = env.observation
    return ScriptOutcome(
        status=STATUS_SUCCESS if env.success else STATUS_FAILURE,
        steps_used=0,
        trace=[],
        obs_before=obs,
        obs_after=obs,
        episode_done=True,
        success=env.success,
    )


def run_sequence(env: MiniCraftEnv, scripts: Sequence[Script], budget: int) -> List[ScriptOutcome]:
    """Run scripts in order on a live episode, stopping when it ends."""
    outcomes = []
    for script in scripts:
        if env.done:
            break
        outcomes.append(interpret(script, env, budget))
    return outcomes


def evaluate_code(task: TaskSpec, scripts: Sequence[Script], seeds: Sequence[int], episodes: int, budget: int,
                  data: Optional[GameData] = None) -> Dict[int, float]:
    """Per-seed success rate of running the scripts in order, no learning."""
    env = MiniCraftEnv(data)
    per_seed = {}
    for seed in seeds:
        wins = 0
        for episode in range(episodes):
            env.reset(task, seed * EVAL_SEED_STRIDE + episode)
            run_sequence(env, scripts, budget)
            wins += int(env.success)
        per_seed[seed] = wins / episodes if episodes else 0.0
    return per_seed


def inner_loop(sub_action: SubAction, ctx: prompts.ContextBundle, task: TaskSpec, prefix: Sequence[Script],
               backend: ChatBackend, critic, settings: Optional[AgentSettings] = None, seed: int = 0,
               data: Optional[GameData] = None, round_no: int = 0,
               emit: Optional[Callable[[str, dict], None]] = None) -> SubActionResult:
    """Write, check, run and judge one coded sub-action until it is accepted or attempts run out.

    The script runs on a fresh episode after the already accepted sequential scripts.
    Diagnostics, runtime faults and critiques of one attempt feed the next fast_code call.
    """
    settings = settings or AgentSettings()
    if settings.inner_attempts < 1:
        raise ContractViolation("inner_loop needs at least one attempt")
    emit = emit or (lambda kind, payload: None)
    env = MiniCraftEnv(data)
    data = env.data
    context = task_context(task)
    attempts: List[AttemptLog] = []
    last_code, last_error, last_critique = "", "", ""
    record: Optional[CritiqueRecord] = None

    for n in range(1, settings.inner_attempts + 1):
        log = AttemptLog(attempt=n, source="")
        attempts.append(log)
        try:
            source = fast_code(sub_action, ctx, context, backend, last_code, last_error, last_critique,
                               settings.format_retries)
        except AgentResponseError as e:
            log.diagnostic = str(e)
            emit("fast_code", {"attempt": n, "source": "", "diagnostic": log.diagnostic})
            last_error = log.diagnostic
            continue
        log.source = source
        last_code = source
        script, macro = None, None
        try:
            script = parse(source, data)
            if sub_action.mode == "macro":
                macro = compile_macro(script, source=source)
        except ScriptError as e:
            log.diagnostic = e.diagnostic.render()
        except MacroError as e:
            log.diagnostic = f"macro rejected: {e}"
        emit("fast_code", {"attempt": n, "source": source, "diagnostic": log.diagnostic})
        if log.diagnostic:
            last_error = log.diagnostic
            continue

        env.reset(task, seed)
        run_sequence(env, prefix, settings.script_step_budget)
        if env.done:
            outcome = _finished_outcome(env)
        elif macro is not None:
            outcome = macro.run(env)
        else:
            outcome = interpret(script, env, settings.script_step_budget)
        log.status = outcome.status
        record = critic.judge(sub_action, outcome, round_no)
        log.verdict, log.rationale = record.verdict, record.rationale
        emit("critic", {"attempt": n, "status": outcome.status, "verdict": record.verdict, "rationale": record.rationale})
        if record.verdict == VERDICT_SUCCESS:
            return SubActionResult(sub_action, VERDICT_SUCCESS, attempts, record, script, source, macro, outcome)
        last_error = f"runtime fault: {outcome.fault}" if outcome.fault else f"script ended with {outcome.status}"
        last_critique = record.rationale

    reason = last_critique or last_error or "no usable attempt"
    final = CritiqueRecord(
        round=round_no,
        sub_action=sub_action.description,
        mode=sub_action.mode,
        verdict=VERDICT_TOO_HARD,
        rationale=f"{settings.inner_attempts} attempts failed; last: {reason}",
        before=record.before if record else "",
        after=record.after if record else "",
    )
    logger.info("Sub-action '%s' is too hard to code: %s", sub_action.description, reason)
    return SubActionResult(sub_action, VERDICT_TOO_HARD, attempts, final, source=last_code or None)


# --- Run sinks ---------------------------------------------------------------------

class MemorySink:
    """Keeps events, artifacts, metrics and checkpoints in memory."""

    run_id = "memory"

    def __init__(self):
        self.events: List[dict] = []
        self.artifacts: Dict[str, Any] = {}
        self.metrics: List[dict] = []
        self.checkpoint: Optional[dict] = None

    def emit(self, kind: str, payload: dict) -> None:
        self.events.append({"seq": len(self.events) + 1, "kind": kind, **payload})

    def event_count(self) -> int:
        return len(self.events)

    def rewind(self, seq: int) -> None:
        del self.events[seq:]

    def write_artifact(self, name: str, content) -> None:
        self.artifacts[name] = content

    def append_metric(self, record: dict) -> None:
        self.metrics.append(record)

    def save_checkpoint(self, state: dict) -> Optional[str]:
        self.checkpoint = copy.deepcopy(state)
        return None


# --- Trace grammar --------------------------------------------------------------

_TRACE_LETTERS = {
    "round_start": "S",
    "slow_plan": "P",
    "inner_loop_start": "I",
    "fast_code": "F",
    "critic": "C",
    "inner_loop_end": "J",
    "rl_training": "R",
    "code_evaluation": "V",
    "prompt_append": "A",
    "round_end": "E",
}
# a round: plan, one inner loop per coded sub-action, evaluation, critique append;
# a task that is already complete is evaluated without a plan, and a pure-RL run trains without one
_TRACE_GRAMMAR = re.compile(r"(?:S(?:P(?:I(?:FC?)+J)*[RV]A|[RV])E)+")


def trace_string(events: Sequence[dict]) -> str:
    letters = []
    for event in events:
        kind = event["kind"]
        if kind not in _TRACE_LETTERS:
            raise ContractViolation(f"unknown event kind '{kind}'")
        letters.append(_TRACE_LETTERS[kind])
    return "".join(letters)


def check_trace(events: Sequence[dict]) -> bool:
    """True when the driver's events follow the two-loop control flow."""
    kinds = [e for e in events if e["kind"] in _TRACE_LETTERS]
    return _TRACE_GRAMMAR.fullmatch(trace_string(kinds)) is not None


# --- Two-loop driver -----------------------------------------------------------------

Trainer = Callable[..., Any]


class TwoLoopDriver:
    def __init__(self, task: TaskSpec, ctx: prompts.ContextBundle, backends: AgentBackends,
                 agents: Optional[AgentSettings] = None, ppo: Optional[PpoSettings] = None,
                 reward: Optional[RewardSettings] = None, seeds: Sequence[int] = (0,),
                 data: Optional[GameData] = None, sink=None, trainer: Optional[Trainer] = None):
        if not seeds:
            raise ContractViolation("two_loop needs at least one seed")
        self.task = task
        # refreshed per round with the live action space; the caller's bundle stays untouched
        self.ctx = copy.copy(ctx)
        self.backends = backends
        self.settings = agents or AgentSettings()
        self.ppo = ppo or PpoSettings()
        self.reward = reward or RewardSettings()
        self.seeds = list(seeds)
        self.data = data or load_game_data()
        self.sink = sink if sink is not None else MemorySink()
        self.trainer = trainer or train
        self.state = IterationState()
        if self.settings.critic == "llm":
            self.critic = LlmCritic(backends.critic or backends.slow)
        else:
            self.critic = RuleCritic(self.data)
        self._checkpoint: Optional[dict] = None
        self._executed = 0
        self._capped = 0

    # --- bookkeeping ---
    def _emit(self, kind: str, **payload) -> None:
        self.sink.emit(kind, payload)

    def _snapshot(self) -> dict:
        return {
            "iteration": self.state.to_dict(),
            "backends": {role: b.state_dict() for role, b in self.backends.by_role().items()},
            "event_seq": self.sink.event_count(),
            "dead_loops": [self._executed, self._capped],
        }

    def _commit_checkpoint(self) -> None:
        self._checkpoint = self._snapshot()
        self.sink.save_checkpoint(self._checkpoint)

    def restore(self, checkpoint: dict) -> None:
        """Continue from the last completed round of an interrupted run."""
        self.state = IterationState.from_dict(checkpoint["iteration"])
        for role, backend in self.backends.by_role().items():
            if role in checkpoint.get("backends", {}):
                backend.load_state_dict(checkpoint["backends"][role])
        self._executed, self._capped = checkpoint.get("dead_loops", [0, 0])
        self.sink.rewind(checkpoint["event_seq"])
        self._checkpoint = copy.deepcopy(checkpoint)
        logger.info("Resuming %s after round %s", self.task.task_id, self.state.outer_round)

    def _interrupt(self, error: BackendError):
        snapshot = copy.deepcopy(self._checkpoint) if self._checkpoint else self._snapshot()
        for role, backend in self.backends.by_role().items():
            outages = backend.state_dict().get("outages")
            if outages is not None:
                snapshot["backends"].setdefault(role, {})["outages"] = outages
        path = self.sink.save_checkpoint(snapshot)
        logger.error("Backend outage in round %s: %s", self.state.outer_round + 1, error)
        return RunInterrupted(f"backend outage: {error}", path)

    # --- main loop ---
    def run(self) -> RunReport:
        started = time.monotonic()
        if self._checkpoint is None:
            self._commit_checkpoint()
        while self.state.status == "running":
            try:
                self._round(self.state.outer_round + 1)
            except BackendError as e:
                raise self._interrupt(e) from e
            self._commit_checkpoint()
        return self._report(time.monotonic() - started)

    def _round(self, r: int) -> None:
        s = self.settings
        self._emit("round_start", round=r)
        logger.info("Round %s of %s for %s", r, s.outer_rounds, self.task.task_id)

        env = MiniCraftEnv(self.data)
        env.reset(self.task, self.seeds[0])
        if env.success:
            per_seed = {seed: 1.0 for seed in self.seeds}
            self._emit("code_evaluation", round=r, per_seed=_keyed(per_seed), success=1.0, vacuous=True)
            self._finish_round(r, None, [], per_seed, frames=0, curves={}, dead=(0, 0))
            return
        self._refresh_context(env, [])

        plan = slow_plan(self.task, self.ctx, self.state, self.backends.slow, s)
        self._emit("slow_plan", round=r, plan=plan.to_dict())
        self.sink.write_artifact(f"round{r}/plan.txt", plan.render() + "\n")
        logger.info("Round %s plan: %s", r, "; ".join(f"{a.description} [{a.mode}]" for a in plan.actions))

        results: List[SubActionResult] = []
        prefix: List[Script] = []
        macros: List[MacroAction] = []
        for index, action in enumerate(plan.actions, 1):
            if action.mode == "learn":
                continue
            self._emit("inner_loop_start", round=r, index=index, description=action.description, mode=action.mode)
            emit = self._scoped_emit(r, index)
            result = inner_loop(action, self.ctx, self.task, prefix, self.backends.fast, self.critic, s,
                                seed=self.seeds[0], data=self.data, round_no=r, emit=emit)
            for log in result.attempts:
                if log.source:
                    self.sink.write_artifact(f"round{r}/sub{index}_attempt{log.attempt}.as", log.source)
            self._emit("inner_loop_end", round=r, index=index, verdict=result.verdict, attempts=len(result.attempts))
            if result.accepted and action.mode == "code":
                prefix.append(result.script)
            if result.accepted and result.macro is not None and all(m.macro_id != result.macro.macro_id for m in macros):
                macros.append(result.macro)
                self._refresh_context(env, macros)
            results.append(result)

        dead = (sum(x.executed() for x in results), sum(x.capped() for x in results))
        learn = plan.learn_action() if s.allow_learn else None
        if learn is not None:
            per_seed, frames, curves = self._train(r, prefix, macros)
        else:
            sequence = [x.script for x in results if x.accepted]
            per_seed = evaluate_code(self.task, sequence, self.seeds, s.eval_episodes, s.script_step_budget, self.data)
            frames, curves = 0, {}
            self._emit("code_evaluation", round=r, per_seed=_keyed(per_seed), success=_mean(per_seed))
        self._finish_round(r, plan, results, per_seed, frames, curves, dead)

    def _refresh_context(self, env: MiniCraftEnv, macros: List[MacroAction]) -> None:
        self.ctx.refresh(env, build_action_space(env.cardinalities, macros))

    def _scoped_emit(self, r: int, index: int):
        def emit(kind: str, payload: dict) -> None:
            self._emit(kind, round=r, index=index, **payload)
        return emit

    def _train(self, r: int, prefix: List[Script], macros: List[MacroAction]):
        per_seed: Dict[int, float] = {}
        curves: Dict[int, List[dict]] = {}
        frames = 0
        for seed in self.seeds:
            cfg = RlConfig.from_settings(self.task, self.ppo, self.reward, seed, macros=macros, prefix=prefix)

            def on_iteration(record, seed=seed):
                self.sink.append_metric({"round": r, "seed": seed, **record})

            try:
                result = self.trainer(cfg, self.ppo.frames, data=self.data, on_iteration=on_iteration)
            except RolloutError as e:
                logger.warning("Round %s seed %s: %s; scoring the scripts alone", r, seed, e)
                scripts = prefix + [m.script for m in macros]
                per_seed.update(evaluate_code(self.task, scripts, [seed], self.settings.eval_episodes,
                                              self.settings.script_step_budget, self.data))
                continue
            per_seed[seed] = float(result.best_success)
            curves[seed] = list(result.curve)
            frames += int(result.frames)
            checkpoint_bytes = getattr(result, "checkpoint_bytes", None)
            if checkpoint_bytes is not None:
                self.sink.write_artifact(f"round{r}/policy_seed{seed}.mcnn", checkpoint_bytes())
        self._emit("rl_training", round=r, per_seed=_keyed(per_seed), success=_mean(per_seed), frames=frames,
                   macros=[m.macro_id for m in macros], prefix=len(prefix))
        return per_seed, frames, curves

    def _finish_round(self, r: int, plan: Optional[SubActionPlan], results: List[SubActionResult],
                      per_seed: Dict[int, float], frames: int, curves: Dict[int, List[dict]],
                      dead: Tuple[int, int]) -> None:
        s, st = self.settings, self.state
        success = _mean(per_seed)
        self._executed += dead[0]
        self._capped += dead[1]
        st.frames += frames
        if plan is not None:
            critiques = [x.critique for x in results]
            st.append_critiques(critiques)
            rendered = [c.render() for c in critiques]
            self._emit("prompt_append", round=r, critiques=rendered)
            self.sink.write_artifact(f"round{r}/critiques.txt", "\n".join(rendered) + "\n")
        if success > st.best_success or st.best_round == 0:
            st.best_success, st.best_round = success, r
        st.outer_round = r
        st.rounds.append({
            "round": r,
            "plan": plan.to_dict() if plan else None,
            "sub_actions": [
                {**x.sub_action.to_dict(), "verdict": x.verdict, "source": x.source,
                 "macro_id": x.macro.macro_id if x.macro else None,
                 "attempts": [a.to_dict() for a in x.attempts]}
                for x in results
            ],
            "success": success,
            "per_seed": _keyed(per_seed),
            "frames": frames,
            "curves": {str(k): v for k, v in curves.items()},
            "dead_loop_ratio": dead[1] / dead[0] if dead[0] else 0.0,
        })
        if success >= s.success_threshold:
            st.status = "solved"
        elif r >= s.outer_rounds:
            st.status = "budget-exhausted"
        self._emit("round_end", round=r, success=success, status=st.status)
        logger.info("Round %s done: success=%.3f status=%s", r, success, st.status)

    def _report(self, wall_clock: float) -> RunReport:
        st = self.state
        best = next((x for x in st.rounds if x["round"] == st.best_round), {})
        return RunReport(
            run_id=getattr(self.sink, "run_id", "memory"),
            task=self.task.task_id,
            status=st.status,
            final_success=st.best_success,
            per_seed=dict(best.get("per_seed", {})),
            rounds=copy.deepcopy(st.rounds),
            frames=st.frames,
            wall_clock=wall_clock,
            dead_loop_ratio=self._capped / self._executed if self._executed else 0.0,
        )


def _keyed(per_seed: Dict[int, float]) -> Dict[str, float]:
    return {str(k): float(v) for k, v in per_seed.items()}


def _mean(per_seed: Dict[int, float]) -> float:
    return float(np.mean(list(per_seed.values()))) if per_seed else 0.0


def two_loop(task: TaskSpec, ctx: prompts.ContextBundle, backends: AgentBackends,
             agents: Optional[AgentSettings] = None, ppo: Optional[PpoSettings] = None,
             reward: Optional[RewardSettings] = None, seeds: Sequence[int] = (0,),
             data: Optional[GameData] = None, sink=None, trainer: Optional[Trainer] = None,
             checkpoint: Optional[dict] = None) -> RunReport:
    driver = TwoLoopDriver(task, ctx, backends, agents, ppo, reward, seeds, data, sink, trainer)
    if checkpoint is not None:
        driver.restore(checkpoint)
    return driver.run()


# --- Ablation variants -----------------------------------------------------------------

def variant_settings(variant: str, base: AgentSettings) -> AgentSettings:
    """Agent settings for a named ablation variant (pure-rl runs without agents)."""
    table = {
        "pure-code": {"outer_rounds": 1, "allow_learn": False},
        "zero-shot": {"outer_rounds": 1},
        "iter-2": {"outer_rounds": 2},
        "iter-2-no-SP": {"outer_rounds": 2, "planning_tips": False},
        "iter-3": {"outer_rounds": 3},
    }
    if variant not in table:
        raise ContractViolation(f"variant '{variant}' has no agent settings")
    return dataclasses.replace(base, **table[variant])


def pure_rl(task: TaskSpec, ppo: PpoSettings, reward: RewardSettings, seeds: Sequence[int],
            data: Optional[GameData] = None, sink=None, trainer: Optional[Trainer] = None,
            success_threshold: float = 0.5) -> RunReport:
    """PPO on primitive actions only, reported in the same shape as a two-loop run."""
    data = data or load_game_data()
    sink = sink if sink is not None else MemorySink()
    trainer = trainer or train
    started = time.monotonic()
    sink.emit("round_start", {"round": 1})
    per_seed, curves, frames = {}, {}, 0
    for seed in seeds:
        cfg = RlConfig.from_settings(task, ppo, reward, seed)
        result = trainer(cfg, ppo.frames, data=data,
                         on_iteration=lambda record, seed=seed: sink.append_metric({"round": 1, "seed": seed, **record}))
        per_seed[seed] = float(result.best_success)
        curves[str(seed)] = list(result.curve)
        frames += int(result.frames)
    success = _mean(per_seed)
    status = "solved" if success >= success_threshold else "budget-exhausted"
    sink.emit("rl_training", {"round": 1, "per_seed": _keyed(per_seed), "success": success, "frames": frames,
                              "macros": [], "prefix": 0})
    sink.emit("round_end", {"round": 1, "success": success, "status": status})
    return RunReport(
        run_id=getattr(sink, "run_id", "memory"),
        task=task.task_id,
        status=status,
        final_success=success,
        per_seed=_keyed(per_seed),
        rounds=[{"round": 1, "plan": None, "sub_actions": [], "success": success, "per_seed": _keyed(per_seed),
                 "frames": frames, "curves": curves, "dead_loop_ratio": 0.0}],
        frames=frames,
        wall_clock=time.monotonic() - started,
        dead_loop_ratio=0.0,
    )
