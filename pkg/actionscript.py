# actionscript.py - the small scripting language coded sub-actions are written in.
# Responsibilities:
#   - Lex and parse source text into a frozen AST (every loop bounded by a cap).
#   - Check names (observation fields, items, blocks) and counts after parsing.
#   - Print ASTs back to canonical text.
#   - Interpret scripts against a MiniCraftEnv, or wrap them as macro actions for RL.
# Grammar and examples: ACTIONSCRIPT.md

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from errors import ContractViolation, Diagnostic, MacroError, ScriptError
from minicraft import (
    AIR,
    CELL_KINDS,
    FN_ATTACK,
    FN_CRAFT,
    FN_DESTROY,
    FN_PLACE,
    FN_USE,
    MOB_KINDS,
    NO_ENTITY,
    GameData,
    MiniCraftEnv,
    MultiDiscreteAction,
    Observation,
    load_game_data,
)

logger = logging.getLogger(__name__)

MAX_SOURCE_BYTES = 64 * 1024

STATUS_SUCCESS = "success"
STATUS_FAILURE = "failure"
STATUS_CAP = "step-cap-exhausted"
STATUS_FAULT = "runtime-fault"

SIMPLE_PRIMITIVES = (
    "noop", "forward", "back", "left", "right", "jump",
    "turn_left", "turn_right", "turn_around", "attack", "use",
)
ITEM_PRIMITIVES = ("craft", "place", "destroy")
KEYWORDS = {
    "repeat", "if", "else", "while", "cap", "let", "halt", "success", "failure",
    "and", "or", "not", "sees", "has", "count", "true", "false", "act",
} | set(SIMPLE_PRIMITIVES) | set(ITEM_PRIMITIVES)
COMPARE_OPS = ("<", "<=", ">", ">=", "==", "!=")
STATEMENT_START = ("repeat", "if", "while", "let", "halt", "act") + SIMPLE_PRIMITIVES + ITEM_PRIMITIVES

# things scripts can measure distances and bearings to
TARGETS = tuple(k for k in CELL_KINDS if k != AIR) + MOB_KINDS
NUMBER_FIELDS = (
    tuple(f"nearest_{t}_dist" for t in TARGETS)
    + tuple(f"{t}_bearing" for t in TARGETS)
    + ("tick", "yaw", "x", "y")
)
STRING_FIELDS = ("front_block", "front_entity")
FIELDS = NUMBER_FIELDS + STRING_FIELDS


# ---------------------- AST ---------------------- #
@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Ref:
    """An observation field, or a variable bound earlier with `let`."""
    name: str


@dataclass(frozen=True)
class Count:
    item: str


Operand = Union[Num, Str, Ref, Count]


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Compare:
    op: str
    left: Operand
    right: Operand


@dataclass(frozen=True)
class Sees:
    name: str


@dataclass(frozen=True)
class Has:
    item: str
    count: int = 1


@dataclass(frozen=True)
class Not:
    inner: "Predicate"


@dataclass(frozen=True)
class BoolOp:
    op: str  # and | or
    left: "Predicate"
    right: "Predicate"


Predicate = Union[Const, Compare, Sees, Has, Not, BoolOp]


@dataclass(frozen=True)
class Primitive:
    name: str
    arg: Optional[str] = None
    vector: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class Repeat:
    count: int
    body: Tuple["Statement", ...]


@dataclass(frozen=True)
class If:
    pred: Predicate
    body: Tuple["Statement", ...]
    orelse: Tuple["Statement", ...] = ()


@dataclass(frozen=True)
class While:
    pred: Predicate
    cap: Optional[int]
    body: Tuple["Statement", ...]


@dataclass(frozen=True)
class Let:
    name: str
    field: str


@dataclass(frozen=True)
class Halt:
    outcome: str  # success | failure


Statement = Union[Primitive, Repeat, If, While, Let, Halt]


@dataclass(frozen=True)
class Script:
    statements: Tuple[Statement, ...]


# ---------------------- lexer ---------------------- #
@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | str | sym | eof
    value: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)"
    r"|(?P<nl>\n)"
    r"|(?P<comment>#[^\n]*)"
    r"|(?P<num>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<str>\"[^\"\n]*\")"
    r"|(?P<sym><=|>=|==|!=|[{}()<>=;])"
)


def tokenize(source: str) -> List[Token]:
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            ch = source[pos]
            if ch == '"':
                raise ScriptError(Diagnostic("E_LEX", line, col, "unterminated string literal"))
            raise ScriptError(Diagnostic("E_LEX", line, col, f"unexpected character {ch!r}"))
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "str":
            tokens.append(Token("str", text[1:-1], line, col))
        elif kind in ("num", "ident", "sym"):
            tokens.append(Token(kind, text, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------- parser ---------------------- #
class _Parser:
    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.pos = 0
        self.open_blocks: List[Token] = []
        # id(node) -> (line, col) for diagnostics raised after parsing
        self.where: Dict[int, Tuple[int, int]] = {}

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, value: str) -> bool:
        return self.tok.kind in ("ident", "sym") and self.tok.value == value

    def fail(self, message: str, expected: Sequence[str] = ()) -> ScriptError:
        tok = self.tok
        if tok.kind == "eof" and self.open_blocks:
            opener = self.open_blocks[-1]
            return ScriptError(Diagnostic(
                "E_UNCLOSED", opener.line, opener.col,
                "block opened here is never closed", ("}",),
            ))
        found = "end of input" if tok.kind == "eof" else repr(tok.value)
        return ScriptError(Diagnostic("E_SYNTAX", tok.line, tok.col, f"{message}, found {found}", tuple(expected)))

    def expect(self, value: str) -> Token:
        if not self.at(value):
            raise self.fail(f"expected '{value}'", (value,))
        return self.advance()

    def expect_int(self, what: str) -> int:
        tok = self.tok
        if tok.kind != "num" or not re.fullmatch(r"-?\d+", tok.value):
            raise self.fail(f"expected an integer {what}", ("<integer>",))
        self.advance()
        return int(tok.value)

    def mark(self, node, tok: Token):
        self.where[id(node)] = (tok.line, tok.col)
        return node

    def expect_ident(self, what: str) -> str:
        tok = self.tok
        if tok.kind != "ident":
            raise self.fail(f"expected {what}", (f"<{what}>",))
        self.advance()
        return tok.value

    # --- statements ---
    def program(self) -> Script:
        stmts = []
        while self.tok.kind != "eof":
            stmts.append(self.statement())
        return Script(tuple(stmts))

    def block(self) -> Tuple[Statement, ...]:
        self.open_blocks.append(self.expect("{"))
        stmts = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise self.fail("unclosed block")
            stmts.append(self.statement())
        self.advance()
        self.open_blocks.pop()
        return tuple(stmts)

    def statement(self) -> Statement:
        while self.at(";"):
            self.advance()
        tok = self.tok
        if tok.kind == "eof":
            raise self.fail("expected a statement", STATEMENT_START)
        if tok.kind != "ident":
            raise self.fail("expected a statement", STATEMENT_START)
        word = tok.value
        if word == "repeat":
            self.advance()
            n = self.expect_int("repeat count")
            stmt = Repeat(n, self.block())
        elif word == "if":
            self.advance()
            pred = self.predicate()
            body = self.block()
            orelse: Tuple[Statement, ...] = ()
            if self.at("else"):
                self.advance()
                orelse = self.block()
            stmt = If(pred, body, orelse)
        elif word == "while":
            self.advance()
            pred = self.predicate()
            cap = None
            if self.at("cap"):
                self.advance()
                cap = self.expect_int("step cap")
            stmt = While(pred, cap, self.block())
        elif word == "let":
            self.advance()
            name = self.expect_ident("variable name")
            self.expect("=")
            stmt = Let(name, self.expect_ident("observation field"))
        elif word == "halt":
            self.advance()
            if not (self.at("success") or self.at("failure")):
                raise self.fail("expected halt outcome", ("success", "failure"))
            stmt = Halt(self.advance().value)
        elif word in SIMPLE_PRIMITIVES:
            self.advance()
            stmt = Primitive(word)
        elif word in ITEM_PRIMITIVES:
            self.advance()
            stmt = Primitive(word, arg=self.expect_ident("item name"))
        elif word == "act":
            self.advance()
            stmt = Primitive("act", vector=tuple(self.expect_int("action component") for _ in range(7)))
        else:
            raise self.fail(f"unknown statement '{word}'", STATEMENT_START)
        while self.at(";"):
            self.advance()
        return self.mark(stmt, tok)

    # --- predicates ---
    def predicate(self) -> Predicate:
        left = self.conjunction()
        while self.at("or"):
            self.advance()
            left = BoolOp("or", left, self.conjunction())
        return left

    def conjunction(self) -> Predicate:
        left = self.negation()
        while self.at("and"):
            self.advance()
            left = BoolOp("and", left, self.negation())
        return left

    def negation(self) -> Predicate:
        if self.at("not"):
            self.advance()
            return Not(self.negation())
        return self.atom()

    def atom(self) -> Predicate:
        start = self.tok
        if self.at("("):
            self.advance()
            inner = self.predicate()
            self.expect(")")
            return inner
        if self.at("true") or self.at("false"):
            return Const(self.advance().value == "true")
        if self.at("sees"):
            self.advance()
            if self.tok.kind != "str":
                raise self.fail("expected a quoted block or entity name", ('"<name>"',))
            return self.mark(Sees(self.advance().value), start)
        if self.at("has"):
            self.advance()
            item = self.expect_ident("item name")
            n = 1
            if self.tok.kind == "num":
                n = self.expect_int("item count")
            return self.mark(Has(item, n), start)
        left = self.operand()
        if not (self.tok.kind == "sym" and self.tok.value in COMPARE_OPS):
            raise self.fail("expected a comparison operator", COMPARE_OPS)
        op = self.advance().value
        return self.mark(Compare(op, left, self.operand()), start)

    def operand(self) -> Operand:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.value))
        if tok.kind == "str":
            self.advance()
            return Str(tok.value)
        if tok.kind == "ident" and tok.value == "count":
            self.advance()
            return self.mark(Count(self.expect_ident("item name")), tok)
        if tok.kind == "ident" and tok.value not in KEYWORDS:
            self.advance()
            return self.mark(Ref(tok.value), tok)
        raise self.fail("expected a number, string, field or count", ("<number>", '"<string>"', "<field>", "count"))


# ---------------------- checker ---------------------- #
# Names are resolved after parsing so structural errors (an unclosed block) win over
# semantic ones (a missing cap) in the same source.
class _Checker:
    def __init__(self, data: GameData, where: Dict[int, Tuple[int, int]], cardinalities: Sequence[int]):
        self.data = data
        self.items = set(data.items)
        self.craftable = {r.output for r in data.recipes}
        self.visible = set(TARGETS)
        self.cardinalities = cardinalities
        self.bound: Dict[str, str] = {}
        self.where = where

    def error(self, code: str, node, message: str) -> ScriptError:
        line, col = self.where.get(id(node), (1, 1))
        return ScriptError(Diagnostic(code, line, col, message))

    def check(self, script: Script) -> None:
        self.block(script.statements)

    def block(self, stmts: Sequence[Statement]) -> None:
        for stmt in stmts:
            self.statement(stmt)

    def statement(self, stmt: Statement) -> None:
        if isinstance(stmt, Repeat):
            if stmt.count < 1:
                raise self.error("E_BAD_COUNT", stmt, f"repeat count must be >= 1, got {stmt.count}")
            self.block(stmt.body)
        elif isinstance(stmt, If):
            self.predicate(stmt.pred)
            self.block(stmt.body)
            self.block(stmt.orelse)
        elif isinstance(stmt, While):
            if stmt.cap is None:
                raise self.error("E_MISSING_CAP", stmt, "while loop needs an explicit 'cap N'")
            if stmt.cap < 1:
                raise self.error("E_BAD_COUNT", stmt, f"step cap must be >= 1, got {stmt.cap}")
            self.predicate(stmt.pred)
            self.block(stmt.body)
        elif isinstance(stmt, Let):
            if stmt.name in KEYWORDS or stmt.name in FIELDS:
                raise self.error("E_SYNTAX", stmt, f"'{stmt.name}' is reserved and cannot be bound")
            if stmt.field not in FIELDS:
                raise self.error("E_UNKNOWN_FIELD", stmt, f"unknown observation field '{stmt.field}'")
            self.bound[stmt.name] = _field_type(stmt.field)
        elif isinstance(stmt, Primitive):
            if stmt.name == "craft" and stmt.arg not in self.craftable:
                raise self.error("E_UNKNOWN_ITEM", stmt, f"no recipe produces '{stmt.arg}'")
            if stmt.name in ("place", "destroy") and stmt.arg not in self.items:
                raise self.error("E_UNKNOWN_ITEM", stmt, f"unknown item '{stmt.arg}'")
            if stmt.name == "act":
                for value, card in zip(stmt.vector, self.cardinalities):
                    if not 0 <= value < card:
                        raise self.error("E_BAD_ARG", stmt, f"act component {value} outside [0, {card})")

    def predicate(self, pred: Predicate) -> None:
        if isinstance(pred, BoolOp):
            self.predicate(pred.left)
            self.predicate(pred.right)
        elif isinstance(pred, Not):
            self.predicate(pred.inner)
        elif isinstance(pred, Sees):
            if pred.name not in self.visible:
                raise self.error("E_UNKNOWN_ITEM", pred, f"unknown block or entity '{pred.name}'")
        elif isinstance(pred, Has):
            if pred.item not in self.items:
                raise self.error("E_UNKNOWN_ITEM", pred, f"unknown item '{pred.item}'")
            if pred.count < 1:
                raise self.error("E_BAD_COUNT", pred, f"has count must be >= 1, got {pred.count}")
        elif isinstance(pred, Compare):
            lt, rt = self.operand(pred.left), self.operand(pred.right)
            if lt != rt:
                raise self.error("E_TYPE", pred, f"cannot compare {lt} with {rt}")
            if lt == "string" and pred.op not in ("==", "!="):
                raise self.error("E_TYPE", pred, f"strings only support == and !=, not {pred.op}")

    def operand(self, op: Operand) -> str:
        if isinstance(op, Num):
            return "number"
        if isinstance(op, Str):
            return "string"
        if isinstance(op, Count):
            if op.item not in self.items:
                raise self.error("E_UNKNOWN_ITEM", op, f"unknown item '{op.item}'")
            return "number"
        if op.name in self.bound:
            return self.bound[op.name]
        if op.name not in FIELDS:
            raise self.error("E_UNKNOWN_FIELD", op, f"unknown observation field or unbound variable '{op.name}'")
        return _field_type(op.name)


def _field_type(name: str) -> str:
    return "string" if name in STRING_FIELDS else "number"


def parse(source: str, data: Optional[GameData] = None) -> Script:
    """Parse and check a script; raises ScriptError carrying a positioned Diagnostic."""
    if len(source.encode("utf-8")) > MAX_SOURCE_BYTES:
        raise ScriptError(Diagnostic("E_TOO_LARGE", 1, 1, f"script exceeds {MAX_SOURCE_BYTES} bytes"))
    tokens = tokenize(source)
    if tokens[0].kind == "eof":
        raise ScriptError(Diagnostic("E_EMPTY", 1, 1, "program has no statements"))
    parser = _Parser(tokens)
    script = parser.program()
    data = data or load_game_data()
    cardinalities = (3, 3, 2, int(data.world["yaw_bins"]), 6, len(data.recipes), int(data.world["inventory_slots"]))
    _Checker(data, parser.where, cardinalities).check(script)
    return script


def diagnose(source: str, data: Optional[GameData] = None) -> Optional[Diagnostic]:
    try:
        parse(source, data)
    except ScriptError as e:
        return e.diagnostic
    return None


# ---------------------- printer ---------------------- #
def _fmt_num(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _fmt_operand(op: Operand) -> str:
    if isinstance(op, Num):
        return _fmt_num(op.value)
    if isinstance(op, Str):
        return f'"{op.value}"'
    if isinstance(op, Count):
        return f"count {op.item}"
    return op.name


_PRECEDENCE = {"or": 1, "and": 2}


def _fmt_pred(pred: Predicate) -> str:
    if isinstance(pred, Const):
        return "true" if pred.value else "false"
    if isinstance(pred, Compare):
        return f"{_fmt_operand(pred.left)} {pred.op} {_fmt_operand(pred.right)}"
    if isinstance(pred, Sees):
        return f'sees "{pred.name}"'
    if isinstance(pred, Has):
        return f"has {pred.item}" if pred.count == 1 else f"has {pred.item} {pred.count}"
    if isinstance(pred, Not):
        inner = _fmt_pred(pred.inner)
        return f"not ({inner})" if isinstance(pred.inner, BoolOp) else f"not {inner}"
    prec = _PRECEDENCE[pred.op]
    left = _fmt_pred(pred.left)
    if isinstance(pred.left, BoolOp) and _PRECEDENCE[pred.left.op] < prec:
        left = f"({left})"
    right = _fmt_pred(pred.right)
    if isinstance(pred.right, BoolOp) and _PRECEDENCE[pred.right.op] <= prec:
        right = f"({right})"
    return f"{left} {pred.op} {right}"


def _fmt_block(stmts: Sequence[Statement], depth: int) -> List[str]:
    lines: List[str] = []
    pad = "  " * depth
    for stmt in stmts:
        if isinstance(stmt, Primitive):
            if stmt.vector is not None:
                lines.append(pad + "act " + " ".join(str(v) for v in stmt.vector))
            elif stmt.arg is not None:
                lines.append(f"{pad}{stmt.name} {stmt.arg}")
            else:
                lines.append(pad + stmt.name)
        elif isinstance(stmt, Let):
            lines.append(f"{pad}let {stmt.name} = {stmt.field}")
        elif isinstance(stmt, Halt):
            lines.append(f"{pad}halt {stmt.outcome}")
        else:
            if isinstance(stmt, Repeat):
                head = f"repeat {stmt.count}"
            elif isinstance(stmt, While):
                head = f"while {_fmt_pred(stmt.pred)} cap {stmt.cap}"
            else:
                head = f"if {_fmt_pred(stmt.pred)}"
            lines.extend(_fmt_braced(pad + head, stmt.body, depth))
            if isinstance(stmt, If) and stmt.orelse:
                lines[-1] += " else {"
                lines.extend(_fmt_block(stmt.orelse, depth + 1))
                lines.append(pad + "}")
    return lines


def _fmt_braced(head: str, body: Sequence[Statement], depth: int) -> List[str]:
    if not body:
        return [head + " {}"]
    return [head + " {"] + _fmt_block(body, depth + 1) + ["  " * depth + "}"]


def canonical_print(script: Script) -> str:
    return "\n".join(_fmt_block(script.statements, 0)) + "\n"


# ---------------------- static analysis ---------------------- #
def frame_bound(node: Union[Script, Sequence[Statement]]) -> int:
    """Upper bound on env frames a script can consume."""
    stmts = node.statements if isinstance(node, Script) else node
    total = 0
    for stmt in stmts:
        if isinstance(stmt, Primitive):
            total += 1
        elif isinstance(stmt, Repeat):
            total += stmt.count * frame_bound(stmt.body)
        elif isinstance(stmt, If):
            total += max(frame_bound(stmt.body), frame_bound(stmt.orelse))
        elif isinstance(stmt, While):
            total += stmt.cap if frame_bound(stmt.body) else 0
    return total


def _unconditional_failure(stmts: Sequence[Statement]) -> bool:
    for stmt in stmts:
        if isinstance(stmt, Halt) and stmt.outcome == "failure":
            return True
        if isinstance(stmt, Repeat) and _unconditional_failure(stmt.body):
            return True
    return False


# ---------------------- interpreter ---------------------- #
@dataclass
class ScriptOutcome:
    status: str
    steps_used: int
    trace: List[dict]
    obs_before: Observation
    obs_after: Observation
    fault: Optional[str] = None
    episode_done: bool = False
    success: bool = False

    def summary(self) -> dict:
        return {
            "status": self.status,
            "steps_used": self.steps_used,
            "fault": self.fault,
            "episode_done": self.episode_done,
            "task_success": self.success,
        }


class _Halted(Exception):
    def __init__(self, outcome: str):
        self.outcome = outcome


class _CapHit(Exception):
    pass


class _EpisodeOver(Exception):
    pass


class _Fault(Exception):
    pass


StepHook = Callable[[Observation, bool, List[dict]], None]


class Interpreter:
    """Runs one script on one env; the env is only touched through step()."""

    def __init__(self, env: MiniCraftEnv, step_budget: int, on_step: Optional[StepHook] = None):
        self.env = env
        self.budget = step_budget
        self.on_step = on_step
        self.steps = 0
        self.trace: List[dict] = []
        self.vars: Dict[str, Union[float, str]] = {}
        self.loop_stack: List[Tuple[int, int]] = []  # (cap, steps at loop entry)
        neutral = env.yaw_bins // 2
        quarter = env.yaw_bins // 4
        self._yaw = {"turn_left": neutral - quarter, "turn_right": neutral + quarter, "turn_around": 0}
        self._neutral = neutral

    # --- actions ---
    def _action(self, prim: Primitive) -> Tuple[MultiDiscreteAction, Optional[str]]:
        n = prim.name
        base = MultiDiscreteAction(yaw_delta=self._neutral)
        if prim.vector is not None:
            return MultiDiscreteAction.from_vector(prim.vector), None
        if n == "forward":
            return _with(base, move=1), None
        if n == "back":
            return _with(base, move=2), None
        if n == "left":
            return _with(base, strafe=1), None
        if n == "right":
            return _with(base, strafe=2), None
        if n == "jump":
            return _with(base, jump=1), None
        if n in self._yaw:
            return _with(base, yaw_delta=self._yaw[n]), None
        if n == "attack":
            return _with(base, functional=FN_ATTACK), None
        if n == "use":
            return _with(base, functional=FN_USE), None
        if n == "craft":
            return _with(base, functional=FN_CRAFT, craft_arg=self.env.data.recipe_index(prim.arg)), None
        if n in ("place", "destroy"):
            slot = self.env.inventory_slot(prim.arg)
            if slot is None:
                return base, f"{prim.arg} not in inventory"
            fn = FN_PLACE if n == "place" else FN_DESTROY
            return _with(base, functional=fn, slot_arg=slot), None
        return base, None

    def _issue(self, prim: Primitive) -> None:
        if self.steps >= self.budget:
            raise _CapHit()
        for cap, start in self.loop_stack:
            if self.steps - start >= cap:
                raise _CapHit()
        action, note = self._action(prim)
        _, obs, done, events = self.env.step(action)
        self.steps += 1
        entry = {"op": prim.name, "tick": obs.tick}
        if prim.arg:
            entry["arg"] = prim.arg
        if note:
            entry["note"] = note
        if events:
            entry["events"] = events
        self.trace.append(entry)
        if self.on_step is not None:
            self.on_step(obs, done, events)
        if done:
            raise _EpisodeOver()

    # --- evaluation ---
    def _field(self, name: str) -> Union[float, str]:
        if name in self.vars:
            return self.vars[name]
        obs = self.env.observation
        if name == "tick":
            return float(obs.tick)
        if name == "yaw":
            return float(obs.yaw)
        if name == "x":
            return float(obs.pos[0])
        if name == "y":
            return float(obs.pos[1])
        if name == "front_block":
            return obs.front_block()
        if name == "front_entity":
            x, y = self.env.state.front_cell()
            mob = self.env.state.mob_at(x, y)
            return mob.kind if mob else NO_ENTITY
        if name.startswith("nearest_") and name.endswith("_dist"):
            return obs.nearest(name[len("nearest_"):-len("_dist")])[0]
        if name.endswith("_bearing"):
            _, index = obs.nearest(name[: -len("_bearing")])
            return math.inf if index is None else float(index - len(obs.rays) // 2)
        raise _Fault(f"unknown field {name}")

    def _operand(self, op: Operand) -> Union[float, str]:
        if isinstance(op, Num):
            return op.value
        if isinstance(op, Str):
            return op.value
        if isinstance(op, Count):
            return float(self.env.observation.count(op.item))
        return self._field(op.name)

    def _test(self, pred: Predicate) -> bool:
        if isinstance(pred, Const):
            return pred.value
        if isinstance(pred, Not):
            return not self._test(pred.inner)
        if isinstance(pred, BoolOp):
            # short-circuit, so `sees "tree" and nearest_tree_dist > 1` is safe
            if pred.op == "and":
                return self._test(pred.left) and self._test(pred.right)
            return self._test(pred.left) or self._test(pred.right)
        obs = self.env.observation
        if isinstance(pred, Sees):
            return any(r.block_name == pred.name or r.entity_name == pred.name for r in obs.rays)
        if isinstance(pred, Has):
            return obs.count(pred.item) >= pred.count
        left, right = self._operand(pred.left), self._operand(pred.right)
        for value in (left, right):
            if isinstance(value, float) and math.isinf(value):
                raise _Fault(f"comparison '{_fmt_pred(pred)}' on an infinite distance (target not in view)")
        return {
            "<": lambda a, b: a < b,
            "<=": lambda a, b: a <= b,
            ">": lambda a, b: a > b,
            ">=": lambda a, b: a >= b,
            "==": lambda a, b: a == b,
            "!=": lambda a, b: a != b,
        }[pred.op](left, right)

    def _run(self, stmts: Sequence[Statement]) -> None:
        for stmt in stmts:
            if isinstance(stmt, Primitive):
                self._issue(stmt)
            elif isinstance(stmt, Repeat):
                for _ in range(stmt.count):
                    self._run(stmt.body)
            elif isinstance(stmt, If):
                self._run(stmt.body if self._test(stmt.pred) else stmt.orelse)
            elif isinstance(stmt, While):
                self.loop_stack.append((stmt.cap, self.steps))
                iterations = 0
                while self._test(stmt.pred):
                    if iterations >= stmt.cap or self.steps - self.loop_stack[-1][1] >= stmt.cap:
                        raise _CapHit()
                    self._run(stmt.body)
                    iterations += 1
                self.loop_stack.pop()
            elif isinstance(stmt, Let):
                self.vars[stmt.name] = self._field(stmt.field)
            elif isinstance(stmt, Halt):
                raise _Halted(stmt.outcome)

    def run(self, script: Script) -> ScriptOutcome:
        before = self.env.observation
        status, fault = STATUS_SUCCESS, None
        try:
            self._run(script.statements)
        except _Halted as h:
            status = h.outcome
        except _CapHit:
            status = STATUS_CAP
        except _EpisodeOver:
            status = STATUS_SUCCESS if self.env.success else STATUS_FAILURE
        except _Fault as f:
            status, fault = STATUS_FAULT, str(f)
        return ScriptOutcome(
            status=status,
            steps_used=self.steps,
            trace=self.trace,
            obs_before=before,
            obs_after=self.env.observation,
            fault=fault,
            episode_done=self.env.done,
            success=self.env.success,
        )


def _with(action: MultiDiscreteAction, **changes) -> MultiDiscreteAction:
    values = dict(zip(("move", "strafe", "jump", "yaw_delta", "functional", "craft_arg", "slot_arg"), action.to_vector()))
    values.update(changes)
    return MultiDiscreteAction(**values)


def interpret(script: Script, env: MiniCraftEnv, step_budget: int, on_step: Optional[StepHook] = None) -> ScriptOutcome:
    if step_budget <= 0:
        raise ContractViolation(f"step_budget must be positive, got {step_budget}")
    if env.state is None or env.done:
        raise ContractViolation("interpret needs an environment in the middle of an episode")
    return Interpreter(env, step_budget, on_step).run(script)


# ---------------------- macros ---------------------- #
@dataclass
class MacroAction:
    """A checked script that runs as one semantic action inside the RL action space."""

    macro_id: str
    script: Script
    source: str
    frame_cap: int
    last_outcome: Optional[ScriptOutcome] = field(default=None, repr=False)

    def run(self, env: MiniCraftEnv, on_step: Optional[StepHook] = None) -> ScriptOutcome:
        self.last_outcome = interpret(self.script, env, self.frame_cap, on_step)
        return self.last_outcome

    def __call__(self, env: MiniCraftEnv, on_step: Optional[StepHook] = None) -> int:
        """Run the macro and return the frames it consumed."""
        return self.run(env, on_step).steps_used


def compile_macro(script: Script, macro_id: Optional[str] = None, source: Optional[str] = None) -> MacroAction:
    if _unconditional_failure(script.statements):
        raise MacroError("macro always halts with failure")
    cap = frame_bound(script)
    if cap == 0:
        raise MacroError("macro issues no actions")
    text = source if source is not None else canonical_print(script)
    if macro_id is None:
        macro_id = "macro_" + hashlib.sha1(canonical_print(script).encode("utf-8")).hexdigest()[:8]
    return MacroAction(macro_id=macro_id, script=script, source=text, frame_cap=cap)


def compile_macro_source(source: str, macro_id: Optional[str] = None, data: Optional[GameData] = None) -> MacroAction:
    return compile_macro(parse(source, data), macro_id=macro_id, source=source)


GRAMMAR_SUMMARY = """\
program    := statement*
statement  := repeat N { ... } | if PRED { ... } [else { ... }]
            | while PRED cap N { ... } | let NAME = FIELD | halt success|failure
            | noop | forward | back | left | right | jump | turn_left | turn_right
            | turn_around | attack | use | craft ITEM | place ITEM | destroy ITEM
            | act MOVE STRAFE JUMP YAW FUNCTIONAL CRAFT SLOT
PRED       := PRED or PRED | PRED and PRED | not PRED | ( PRED ) | true | false
            | sees "NAME" | has ITEM [N] | OPERAND (< | <= | > | >= | == | !=) OPERAND
OPERAND    := number | "string" | FIELD | variable | count ITEM
Every while loop must declare `cap N`: it stops after N iterations or N frames.
Comparing an infinite distance (target not visible) is a runtime fault; guard with `sees`.
"""
