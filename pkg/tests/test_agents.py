from dataclasses import replace

import pytest

import ppo
from actionscript import compile_macro_source, interpret, parse
from agents import (
    VERDICT_FAILURE,
    VERDICT_SUCCESS,
    VERDICT_TOO_HARD,
    AgentBackends,
    CritiqueRecord,
    IterationState,
    MemorySink,
    RuleCritic,
    SubAction,
    check_trace,
    extract_code,
    fast_code,
    inner_loop,
    parse_plan,
    pure_rl,
    slow_plan,
    trace_string,
    two_loop,
    variant_settings,
)
from autodiff import decode_checkpoint
from backends import ChatBackend, ScriptedBackend
from config import AgentSettings, RewardSettings
from errors import AgentResponseError, ContractViolation, RunInterrupted
from minicraft import CELL_INDEX, MiniCraftEnv, TaskSpec, get_task

IMPROVING_TRACE = "SPIFCJIFCFCFCFCJVAE" + "SPIFCJRAE" + "SPIFCJIFCJRAE"
SEEDS = (0, 1)


class Recorder(ChatBackend):
    """Passes calls through and keeps every prompt it saw."""

    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def complete(self, messages):
        self.prompts.append(messages)
        return self.inner.complete(messages)

    def state_dict(self):
        return self.inner.state_dict()

    def load_state_dict(self, state):
        self.inner.load_state_dict(state)


def field_env(data, tree_ahead=None):
    env = MiniCraftEnv(data)
    env.reset(TaskSpec("Field", "log", 1, 200, (), "empty", "harvest a log"), 0)
    env.state.agent_yaw = 1
    if tree_ahead is not None:
        x, y = env.state.agent_pos
        env.state.grid[y, x + tree_ahead] = CELL_INDEX["tree"]
        env.state.durability[y, x + tree_ahead] = env.data.durability["tree"]
    env.observation = env.observe()
    return env


@pytest.fixture
def run(data, ctx, scripted, trainer, agent_settings, ppo_settings):
    def go(fixture, sink=None, checkpoint=None, task=None, backend=None, **overrides):
        sink = sink if sink is not None else MemorySink()
        report = two_loop(
            task or get_task("HarvestLog", data), ctx, AgentBackends.shared(backend or scripted(fixture)),
            agents=replace(agent_settings, **overrides), ppo=ppo_settings, reward=RewardSettings(),
            seeds=SEEDS, data=data, sink=sink, trainer=trainer, checkpoint=checkpoint,
        )
        return report, sink
    return go


# --- response parsing ---

def test_parse_plan_reads_tags_and_reasons():
    plan = parse_plan(
        "Explain: trees are visible\nso walking is easy.\nActions can be coded:\n"
        "1) find a tree [code] - rays show it\n2. attack 20 times [MACRO]: no moving\n3) harvest a log [learn]\n"
    )
    assert plan.explain == "trees are visible so walking is easy."
    assert [(a.description, a.mode) for a in plan.actions] == [
        ("find a tree", "code"), ("attack 20 times", "macro"), ("harvest a log", "learn"),
    ]
    assert plan.actions[1].explain == "no moving"
    assert plan.learn_action().description == "harvest a log"
    assert parse_plan(plan.render()) == plan


@pytest.mark.parametrize("reply", [
    "I would walk to a tree and chop it.",
    "Actions can be coded:\n1) find a tree\n",
    "Actions can be coded:\nnothing to do\n",
    "Actions can be coded:\n1) cut a log [learn]\n2) craft planks [learn]\n",
])
def test_parse_plan_rejects_malformed_replies(reply):
    with pytest.raises(AgentResponseError):
        parse_plan(reply)


def test_extract_code():
    assert extract_code("Code:\n```actionscript\nattack\n```") == "attack\n"
    assert extract_code("```\nforward\nattack\n```\nmore text") == "forward\nattack\n"
    with pytest.raises(AgentResponseError):
        extract_code("attack forward")


# --- agents ---

def test_slow_plan_refuses_to_recode_a_too_hard_action(ctx, data):
    backend = ScriptedBackend.from_dict({"roles": {"slow": [
        {"times": 1, "reply": "Actions can be coded:\n1) cut a log [code]"},
        {"reply": "Actions can be coded:\n1) cut a log [learn]"},
    ]}})
    state = IterationState(critiques=[CritiqueRecord(1, "Cut a  log", "code", VERDICT_TOO_HARD, "4 attempts failed")])
    plan = slow_plan(get_task("HarvestLog", data), ctx, state, backend)
    assert plan.actions[0].mode == "learn"
    assert backend.calls["slow"] == 2


def test_slow_plan_gives_up_after_format_retries(ctx, data):
    backend = ScriptedBackend.from_dict({"roles": {"slow": [{"reply": "no plan here"}]}})
    with pytest.raises(AgentResponseError):
        slow_plan(get_task("HarvestLog", data), ctx, IterationState(), backend, AgentSettings(format_retries=2))
    assert backend.calls["slow"] == 3


def test_fast_code_contract(ctx, scripted):
    backend = scripted("improving")
    with pytest.raises(ContractViolation):
        fast_code(SubAction("cut a log", "learn"), ctx, "", backend)
    with pytest.raises(ContractViolation):
        fast_code(SubAction("  ", "code"), ctx, "", backend)
    assert fast_code(SubAction("attack 20 times", "macro"), ctx, "", backend) == "repeat 20 {\n  attack\n}\n"


def test_rule_critic_judges_by_intent(data):
    critic = RuleCritic(data)

    def judge(description, source, env):
        return critic.judge(SubAction(description, "code"), interpret(parse(source, data), env, 50))

    closer = judge("find a tree", "forward", field_env(data, tree_ahead=3))
    assert closer.verdict == VERDICT_SUCCESS
    assert closer.rationale == "nearest tree distance 3.0 -> 2.0"
    assert judge("attack 20 times", "repeat 20 { attack }", field_env(data, tree_ahead=2)).verdict == VERDICT_SUCCESS
    assert judge("attack 20 times", "repeat 5 { attack }", field_env(data, tree_ahead=2)).verdict == VERDICT_FAILURE
    no_log = judge("cut a log", "repeat 3 { attack }", field_env(data, tree_ahead=1))
    assert (no_log.verdict, no_log.rationale.startswith("no log gained")) == (VERDICT_FAILURE, True)
    fault = judge("find a tree", "if tree_bearing < 0 { left }", field_env(data))
    assert fault.verdict == VERDICT_FAILURE and fault.rationale.startswith("runtime fault")
    assert judge("harvest a log", "repeat 20 { attack }", field_env(data, tree_ahead=1)).rationale == "task target reached"


def test_inner_loop_marks_uncompilable_action_too_hard(ctx, data, scripted):
    events = []
    result = inner_loop(
        SubAction("cut a log", "code"), ctx, get_task("HarvestLog", data), [], scripted("always_broken"),
        RuleCritic(data), AgentSettings(inner_attempts=3), data=data, round_no=2,
        emit=lambda kind, payload: events.append(kind),
    )
    assert result.verdict == VERDICT_TOO_HARD
    assert events == ["fast_code"] * 3
    assert all(a.diagnostic.startswith("ERR E_UNCLOSED 1:10") for a in result.attempts)
    assert result.executed() == 0
    assert result.critique.render().startswith("[round 2] cut a log (code): too-hard-to-code")


# --- two-loop driver ---

def test_improving_run_solves_in_the_third_round(run, ppo_settings):
    report, sink = run("improving")
    assert trace_string(sink.events) == IMPROVING_TRACE
    assert check_trace(sink.events)
    assert report.status == "solved"
    assert report.final_success == pytest.approx(0.9)
    assert [r["success"] for r in report.rounds] == pytest.approx([0.0, 0.3, 0.9])
    assert report.per_seed == {"0": pytest.approx(0.9), "1": pytest.approx(0.9)}
    assert report.frames == 2 * len(SEEDS) * ppo_settings.frames
    assert len(sink.metrics) == 2 * len(SEEDS) * 2
    assert 0.0 <= report.dead_loop_ratio <= 1.0

    round1, _, round3 = report.rounds
    assert [s["verdict"] for s in round1["sub_actions"]] == [VERDICT_SUCCESS, VERDICT_TOO_HARD]
    assert len(round1["sub_actions"][1]["attempts"]) == 4
    assert round3["sub_actions"][1]["macro_id"].startswith("macro_")
    assert "round1/plan.txt" in sink.artifacts
    assert "round1/sub2_attempt4.as" in sink.artifacts


def test_slow_prompt_only_grows(run, scripted):
    recorder = Recorder(scripted("improving"))
    run("improving", backend=recorder)
    slow = [m[1]["content"] for m in recorder.prompts if m[0]["content"].startswith("[role:slow]")]
    assert len(slow) == 3
    assert "none yet" in slow[0]
    for earlier, later in zip(slow, slow[1:]):
        critiques = earlier.split("Critique:\n", 1)[1]
        if critiques != "none yet":
            assert later.split("Critique:\n", 1)[1].startswith(critiques)
    assert "[round 2]" in slow[2]


@pytest.mark.parametrize("variant, success", [
    ("zero-shot", 0.0),
    ("pure-code", 0.0),
    ("iter-2", 0.3),
    ("iter-2-no-SP", 0.3),
    ("iter-3", 0.9),
])
def test_ablation_variants(run, agent_settings, variant, success):
    settings = variant_settings(variant, agent_settings)
    report, sink = run("improving", outer_rounds=settings.outer_rounds, allow_learn=settings.allow_learn,
                       planning_tips=settings.planning_tips)
    assert report.final_success == pytest.approx(success)
    assert check_trace(sink.events)


def test_variant_settings(agent_settings):
    no_tips = variant_settings("iter-2-no-SP", agent_settings)
    assert (no_tips.outer_rounds, no_tips.planning_tips) == (2, False)
    assert variant_settings("pure-code", agent_settings).allow_learn is False
    with pytest.raises(ContractViolation):
        variant_settings("pure-rl", agent_settings)


def test_uncompilable_code_falls_back_to_learning(run):
    report, sink = run("always_broken", outer_rounds=2)
    assert trace_string(sink.events) == "SPIFFFFJVAE" + "SPRAE"
    assert report.status == "budget-exhausted"
    assert report.rounds[1]["plan"]["actions"] == [
        {"description": "cut a log", "mode": "learn", "explain": "too difficult to code"},
    ]


def test_malformed_replies_are_retried_inside_the_agents(run):
    report, sink = run("failing_plan", outer_rounds=1)
    assert trace_string(sink.events) == "SPIFCJVAE"
    assert report.status == "budget-exhausted"


def test_already_complete_task_skips_planning(run, data):
    task = replace(get_task("HarvestLog", data), initial_inventory=(("log", 1),))
    report, sink = run("improving", task=task)
    assert trace_string(sink.events) == "SVE"
    assert report.status == "solved"
    assert report.final_success == 1.0


def test_runs_are_deterministic(run):
    first, first_sink = run("improving")
    second, second_sink = run("improving")
    assert first.rounds == second.rounds
    assert trace_string(first_sink.events) == trace_string(second_sink.events)


def test_outage_interrupts_and_resume_finishes_the_same_run(run):
    clean, _ = run("improving")
    sink = MemorySink()
    with pytest.raises(RunInterrupted):
        run("outage", sink=sink)
    checkpoint = sink.checkpoint
    assert checkpoint["iteration"]["outer_round"] == 1
    assert checkpoint["backends"]["slow"]["outages"]["slow"] == {"0": 1}

    resumed, sink = run("outage", sink=sink, checkpoint=checkpoint)
    assert trace_string(sink.events) == IMPROVING_TRACE
    assert resumed.status == "solved"
    assert resumed.rounds == clean.rounds


def test_driver_needs_a_seed(ctx, data, scripted):
    with pytest.raises(ContractViolation):
        two_loop(get_task("HarvestLog", data), ctx, AgentBackends.shared(scripted("improving")), seeds=())


def test_pure_rl_reports_like_a_two_loop_run(data, ppo_settings, trainer):
    sink = MemorySink()
    report = pure_rl(get_task("HarvestLog", data), ppo_settings, RewardSettings(), SEEDS, data, sink, trainer)
    assert trace_string(sink.events) == "SRE"
    assert check_trace(sink.events)
    assert report.status == "budget-exhausted"
    assert report.rounds[0]["plan"] is None
    assert len(sink.metrics) == 2 * len(SEEDS)


def test_trace_grammar_rejects_broken_flows():
    def events(letters):
        kinds = {"S": "round_start", "P": "slow_plan", "I": "inner_loop_start", "F": "fast_code", "C": "critic",
                 "J": "inner_loop_end", "R": "rl_training", "V": "code_evaluation", "A": "prompt_append",
                 "E": "round_end"}
        return [{"kind": kinds[c]} for c in letters]

    assert check_trace(events("SPIFCJVAE"))
    assert not check_trace(events("SPE"))
    assert not check_trace(events("SPIJVAE"))
    assert not check_trace(events("SPIFCJVA"))
    with pytest.raises(ContractViolation):
        trace_string([{"kind": "mystery"}])


MACRO_FIRST = {"roles": {
    "slow": [{"reply": (
        "Explain: hits must not be interrupted.\nActions can be coded:\n"
        "1) attack 20 times [macro] - a tree breaks after 20 hits\n"
        "2) find a tree [code] - the rays show it\n"
        "3) harvest the log [learn] - the learner picks the moment"
    )}],
    "fast": [
        {"when": "Task: attack 20 times", "reply": "Explain: hit in a row.\nCode:\n```actionscript\nrepeat 20 {\n  attack\n}\n```"},
        {"when": "Task: find a tree", "reply": "Explain: look around.\nCode:\n```actionscript\nturn_right\n```"},
    ],
    "critic": [{"reply": "Verdict: success\nRationale: the script did what was asked"}],
}}


def test_fast_prompts_describe_macros_injected_earlier_in_the_round(run, ctx, data):
    macro_id = compile_macro_source("repeat 20 { attack }", data=data).macro_id
    recorder = Recorder(ScriptedBackend.from_dict(MACRO_FIRST))
    report, _ = run(None, backend=recorder, outer_rounds=1)

    fast = ["\n".join(m["content"] for m in messages) for messages in recorder.prompts
            if messages[0]["content"].startswith("[role:fast]")]
    attack = next(p for p in fast if "Task: attack 20 times" in p)
    find = next(p for p in fast if "Task: find a tree" in p)
    assert macro_id not in attack
    assert f"macro {macro_id}" in find
    assert report.rounds[0]["sub_actions"][0]["macro_id"] == macro_id
    assert macro_id not in ctx.act_info


@pytest.mark.slow
def test_real_trainer_receives_the_injected_macro(ctx, data, agent_settings, ppo_settings):
    macro_id = compile_macro_source("repeat 20 { attack }", data=data).macro_id
    spaces = []

    def recording_train(cfg, budget, **kwargs):
        result = ppo.train(cfg, budget, **kwargs)
        spaces.append(result.space)
        return result

    sink = MemorySink()
    report = two_loop(
        get_task("HarvestLog", data), ctx, AgentBackends.shared(ScriptedBackend.from_dict(MACRO_FIRST)),
        agents=replace(agent_settings, outer_rounds=1), ppo=replace(ppo_settings, frames=256),
        reward=RewardSettings(), seeds=SEEDS, data=data, sink=sink, trainer=recording_train,
    )

    assert len(spaces) == len(SEEDS)
    for space in spaces:
        assert space.token_of(macro_id) == space.base_functional
        assert f"macro {macro_id}" in space.describe()[-1]
    for seed in SEEDS:
        _, _, meta = decode_checkpoint(sink.artifacts[f"round1/policy_seed{seed}.mcnn"])
        assert meta["macros"] == [macro_id]
    assert report.rounds[0]["frames"] >= 256 * len(SEEDS)
