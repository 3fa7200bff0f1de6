import numpy as np
import pytest

from actionscript import (
    STATUS_CAP,
    STATUS_FAILURE,
    STATUS_FAULT,
    STATUS_SUCCESS,
    TARGETS,
    BoolOp,
    Compare,
    Const,
    Count,
    Has,
    Halt,
    If,
    Let,
    Not,
    Num,
    Primitive,
    Ref,
    Repeat,
    Script,
    Sees,
    SIMPLE_PRIMITIVES,
    Str,
    While,
    canonical_print,
    compile_macro,
    compile_macro_source,
    diagnose,
    frame_bound,
    interpret,
    parse,
)
from errors import ContractViolation, MacroError, ScriptError
from minicraft import CELL_INDEX, MiniCraftEnv, TaskSpec
from prompts import load_code_examples

NUMBER_FIELDS = ("tick", "yaw", "x", "y", "nearest_tree_dist", "cow_bearing")
STRING_FIELDS = ("front_block", "front_entity")


def field_env(data, tree_ahead=None, max_steps=200):
    env = MiniCraftEnv(data)
    env.reset(TaskSpec("Field", "log", 1, max_steps, (), "empty", "harvest a log"), 0)
    env.state.agent_yaw = 1
    if tree_ahead is not None:
        x, y = env.state.agent_pos
        env.state.grid[y, x + tree_ahead] = CELL_INDEX["tree"]
        env.state.durability[y, x + tree_ahead] = env.data.durability["tree"]
    env.observation = env.observe()
    return env


# ---------------------- generated programs ---------------------- #
class ProgramGenerator:
    def __init__(self, data, rng):
        self.rng = rng
        self.items = list(data.items)
        self.craftable = sorted({r.output for r in data.recipes})
        self.names = 0

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def number(self):
        return Num(float(self.rng.integers(-5, 20)) / self.pick((1, 2)))

    def predicate(self, depth):
        kind = self.rng.integers(7 if depth > 0 else 5)
        if kind == 0:
            return Const(bool(self.rng.integers(2)))
        if kind == 1:
            return Sees(self.pick(TARGETS))
        if kind == 2:
            return Has(self.pick(self.items), int(self.rng.integers(1, 4)))
        if kind == 3:
            left = self.pick((Ref(self.pick(NUMBER_FIELDS)), Count(self.pick(self.items))))
            return Compare(self.pick(("<", "<=", ">", ">=", "==", "!=")), left, self.number())
        if kind == 4:
            return Compare(self.pick(("==", "!=")), Ref(self.pick(STRING_FIELDS)), Str(self.pick(TARGETS)))
        if kind == 5:
            return Not(self.predicate(depth - 1))
        return BoolOp(self.pick(("and", "or")), self.predicate(depth - 1), self.predicate(depth - 1))

    def block(self, depth, size):
        return tuple(self.statement(depth) for _ in range(int(self.rng.integers(0, size + 1))))

    def statement(self, depth):
        kind = self.rng.integers(8 if depth > 0 else 4)
        if kind == 0:
            return Primitive(self.pick(SIMPLE_PRIMITIVES))
        if kind == 1:
            name = self.pick(("craft", "place", "destroy"))
            return Primitive(name, arg=self.pick(self.craftable if name == "craft" else self.items))
        if kind == 2:
            self.names += 1
            return Let(f"v{self.names}", self.pick(NUMBER_FIELDS + STRING_FIELDS))
        if kind == 3:
            return self.pick((Halt("success"), Halt("failure"), Primitive("act", vector=(1, 0, 0, 4, 2, 0, 0))))
        if kind in (4, 5):
            return If(self.predicate(2), self.block(depth - 1, 2), self.block(depth - 1, 2))
        if kind == 6:
            return Repeat(int(self.rng.integers(1, 30)), self.block(depth - 1, 3))
        return While(self.predicate(2), int(self.rng.integers(1, 100)), self.block(depth - 1, 3))

    def script(self):
        stmts = self.block(3, 4)
        return Script(stmts or (Primitive("noop"),))


def test_printed_programs_parse_back_to_the_same_tree(data):
    gen = ProgramGenerator(data, np.random.default_rng(1234))
    for _ in range(500):
        script = gen.script()
        text = canonical_print(script)
        assert parse(text, data) == script, text
        assert canonical_print(parse(text, data)) == text


def test_code_examples_parse(data):
    examples = load_code_examples()
    assert examples
    for example in examples:
        parse(example["code"], data)


# ---------------------- diagnostics ---------------------- #
@pytest.mark.parametrize("source, code, line, col", [
    ("repeat 3 {\n  attack\n", "E_UNCLOSED", 1, 10),
    ("forward\nif sees \"tree\" {\n  repeat 2 { attack }\n", "E_UNCLOSED", 2, 16),
    ("while sees \"tree\" { forward }", "E_MISSING_CAP", 1, 1),
    ("if nearest_diamond_dist < 3 { attack }", "E_UNKNOWN_FIELD", 1, 4),
    ("craft diamond_sword", "E_UNKNOWN_ITEM", 1, 1),
    ("if sees \"dragon\" { attack }", "E_UNKNOWN_ITEM", 1, 4),
    ("if front_block < \"tree\" { attack }", "E_TYPE", 1, 4),
    ("if tick == \"tree\" { attack }", "E_TYPE", 1, 4),
    ("attack $", "E_LEX", 1, 8),
    ("say \"hi", "E_LEX", 1, 5),
    ("", "E_EMPTY", 1, 1),
    ("# nothing but a comment\n", "E_EMPTY", 1, 1),
    ("repeat 0 { attack }", "E_BAD_COUNT", 1, 1),
    ("forward forward }", "E_SYNTAX", 1, 17),
    ("halt maybe", "E_SYNTAX", 1, 6),
    ("act 0 0 0 9 0 0 0", "E_BAD_ARG", 1, 1),
    ("let tick = yaw", "E_SYNTAX", 1, 1),
])
def test_malformed_sources_get_positioned_diagnostics(data, source, code, line, col):
    diag = diagnose(source, data)
    assert diag is not None
    assert (diag.code, diag.line, diag.col) == (code, line, col)
    with pytest.raises(ScriptError) as info:
        parse(source, data)
    assert info.value.diagnostic == diag
    assert diag.render().startswith(f"ERR {code} {line}:{col}")


def test_unclosed_block_names_the_expected_token(data):
    assert diagnose("repeat 3 {\n  attack\n", data).expected == ("}",)


def test_structure_errors_win_over_name_errors(data):
    assert diagnose("craft diamond_sword\nrepeat 2 {", data).code == "E_UNCLOSED"


# ---------------------- interpreter ---------------------- #
def test_twenty_attacks_fell_the_tree(data):
    env = field_env(data, tree_ahead=1)
    outcome = interpret(parse("repeat 20 {\n  attack\n}\n", data), env, 200)
    assert outcome.status == STATUS_SUCCESS
    assert outcome.success and outcome.episode_done
    assert outcome.steps_used == 20
    assert [e["op"] for e in outcome.trace] == ["attack"] * 20
    assert outcome.obs_after.count("log") == 1


def test_moving_between_attacks_never_fells_the_tree(data):
    env = field_env(data, tree_ahead=1)
    outcome = interpret(parse("while not has log cap 30 {\n  attack\n  forward\n}\n", data), env, 200)
    assert outcome.status == STATUS_CAP
    assert outcome.steps_used == 30
    assert not outcome.success


def test_step_budget_caps_the_whole_script(data):
    outcome = interpret(parse("repeat 50 { noop }", data), field_env(data), 10)
    assert (outcome.status, outcome.steps_used) == (STATUS_CAP, 10)


def test_comparing_an_unseen_distance_faults(data):
    outcome = interpret(parse("if tree_bearing < 0 { left }", data), field_env(data), 50)
    assert outcome.status == STATUS_FAULT
    assert "infinite" in outcome.fault


def test_and_short_circuits_the_guard(data):
    outcome = interpret(parse("if sees \"tree\" and tree_bearing < 0 { left }", data), field_env(data), 50)
    assert outcome.status == STATUS_SUCCESS
    assert outcome.steps_used == 0


def test_bearing_and_front_block_fields(data):
    env = field_env(data, tree_ahead=3)
    src = (
        "while not (front_block == \"tree\") cap 10 {\n"
        "  if tree_bearing == 0 { forward } else { halt failure }\n"
        "}\n"
    )
    outcome = interpret(parse(src, data), env, 50)
    assert outcome.status == STATUS_SUCCESS
    assert outcome.steps_used == 2
    assert outcome.obs_after.front_block() == "tree"


def test_halt_failure_and_missing_items(data):
    env = field_env(data)
    outcome = interpret(parse("place crafting_table\nhalt failure\nforward", data), env, 50)
    assert outcome.status == STATUS_FAILURE
    assert outcome.steps_used == 1
    assert outcome.trace[0]["note"] == "crafting_table not in inventory"


def test_interpret_preconditions(data):
    script = parse("noop", data)
    with pytest.raises(ContractViolation):
        interpret(script, field_env(data), 0)
    env = field_env(data, max_steps=1)
    interpret(script, env, 5)
    with pytest.raises(ContractViolation):
        interpret(script, env, 5)


# ---------------------- macros ---------------------- #
def test_frame_bounds(data):
    assert frame_bound(parse("repeat 3 {\n  forward\n  if sees \"tree\" { attack attack }\n}", data)) == 9
    assert frame_bound(parse("while true cap 7 { forward }", data)) == 7
    assert frame_bound(parse("let a = tick", data)) == 0


def test_macro_compilation(data):
    macro = compile_macro_source("repeat 20 {\n  attack\n}\n", data=data)
    assert macro.frame_cap == 20
    assert macro.macro_id.startswith("macro_")
    assert compile_macro(parse("repeat 20 { attack }", data)).macro_id == macro.macro_id
    assert macro(field_env(data, tree_ahead=1)) == 20
    assert macro.last_outcome.success

    with pytest.raises(MacroError):
        compile_macro(parse("halt failure", data))
    with pytest.raises(MacroError):
        compile_macro(parse("let a = tick", data))
