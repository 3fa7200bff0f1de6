"""Prompt templates for the slow, fast, critic and planner agents, plus environment docs."""

import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from actionscript import FIELDS, GRAMMAR_SUMMARY, ITEM_PRIMITIVES, SIMPLE_PRIMITIVES, STRING_FIELDS
from config import CODE_EXAMPLES_PATH
from errors import ConfigError, ContractViolation
from minicraft import FUNCTIONAL_ACTIONS, GameData, MiniCraftEnv

logger = logging.getLogger(__name__)

ROLE_SLOW = "[role:slow]"
ROLE_FAST = "[role:fast]"
ROLE_CRITIC = "[role:critic]"
ROLE_PLANNER = "[role:planner]"

SLOW_ROLE_DESCRIPTION = (
    "You are playing a 2-D crafting game. Assume you are a programmer who writes short action "
    "scripts to complete some parts of this game."
)
FAST_ROLE_DESCRIPTION = (
    "We want to write action scripts to complete some actions in a 2-D crafting game. You are a "
    "helpful assistant that writes the script for the given action."
)
CRITIC_ROLE_DESCRIPTION = (
    "You judge whether a scripted action in a 2-D crafting game did what it was meant to do, "
    "looking at the observations before and after it ran."
)
PLANNER_ROLE_DESCRIPTION = (
    "You organise a long crafting goal into an ordered list of items to obtain, one subtask each."
)

PLANNING_TIPS = (
    "1) If it was unsuccessful to code one action in the last round, the action is too difficult for coding.\n"
    "2) If one action in the last round is too difficult to code, try to further subdivide the action. "
    'For example, if "attack the tree 20 times" is difficult, try "simply attack 20 times".\n'
    "3) Mark an action `macro` when it only pays off under a starting condition the learner should find "
    "(standing next to a tree), and `code` when it can run in order from the start of the episode."
)

SLOW_RESPONSE_FORMAT = (
    "Explain: ...\n"
    "Actions can be coded:\n"
    "1) <action> [code|macro|learn] - <why>\n"
    "2) <action> [code|macro|learn] - <why>\n"
    "3) ..."
)
FAST_RESPONSE_FORMAT = (
    "Explain: ...\n"
    "Code:\n"
    "```actionscript\n"
    "<script>\n"
    "```"
)
CRITIC_RESPONSE_FORMAT = "Verdict: success|failure\nRationale: ..."
PLANNER_RESPONSE_FORMAT = "Order:\n1) <item>\n2) <item>\n3) ..."


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    role_tag: str
    role_description: str
    system: str
    user: str
    response_format: str

    def slots(self) -> List[str]:
        names = []
        for text in (self.system, self.user):
            for _, slot, _, _ in string.Formatter().parse(text):
                if slot and slot not in names:
                    names.append(slot)
        return names

    def render(self, **values) -> List[Dict[str, str]]:
        missing = [s for s in self.slots() if s not in values]
        if missing:
            raise ContractViolation(f"prompt '{self.name}' is missing slots: {', '.join(missing)}")
        system = self.system.format(**values)
        user = self.user.format(**values)
        system = (
            f"{self.role_tag}\n{self.role_description}\n\n{system}\n\n"
            f"You should only respond in the format as described below:\n{self.response_format}"
        )
        return [{"role": "system", "content": system}, {"role": "user", "content": user}]


SLOW_TEMPLATE = PromptTemplate(
    name="slow",
    role_tag=ROLE_SLOW,
    role_description=SLOW_ROLE_DESCRIPTION,
    system=(
        "It is difficult to code all actions in this game. We only want to code as many sub-actions as possible.\n"
        "The task of you is to tell me which sub-actions can be coded by you as action scripts, and which one "
        "should be left to a reinforcement learner (at most one).\n\n"
        "At each round of conversation, I will give you\n"
        "Task: ...\nContext: ...\nCritique: the results of the generated scripts in the last rounds\n\n"
        "Here are some actions coded by humans:\n{programs}\n\n"
        "You should then respond to me with\n"
        "Explain (if applicable): Why can these actions be coded? Are there any actions difficult to code?\n"
        "Actions can be coded: List all actions in order, each tagged code, macro or learn.\n"
        "{planning_tips}"
    ),
    user="Task: {task}\nContext: {context}\nCritique:\n{critique}",
    response_format=SLOW_RESPONSE_FORMAT,
)

FAST_TEMPLATE = PromptTemplate(
    name="fast",
    role_tag=ROLE_FAST,
    role_description=FAST_ROLE_DESCRIPTION,
    system=(
        "Here are the basic actions of the scripting language:\n{programs_template}\n\n"
        "Here are some reference examples:\n{programs_example}\n\n"
        "Here are the attributes of the observation that can be used:\n{obs_info}\n\n"
        "Here are the guidelines of the action space:\n{act_info}\n\n"
        "At each round of conversation, I will give you\n"
        "Task: ...\nContext: ...\nCode from the last round: ...\nExecution error: ...\nCritique: ...\n\n"
        "You should then respond to me with\n"
        "Explain (if applicable): Can the script complete the given action? What do the execution error "
        "and critique imply?"
    ),
    user=(
        "Task: {task}\nContext: {context}\nCode from the last round:\n{last_code}\n"
        "Execution error: {execution_error}\nCritique: {critique}"
    ),
    response_format=FAST_RESPONSE_FORMAT,
)

CRITIC_TEMPLATE = PromptTemplate(
    name="critic",
    role_tag=ROLE_CRITIC,
    role_description=CRITIC_ROLE_DESCRIPTION,
    system="Answer success only when the observations show the action's intent was achieved.",
    user=(
        "Action: {action}\nScript status: {status} after {steps} steps\n"
        "Before: {before}\nAfter: {after}"
    ),
    response_format=CRITIC_RESPONSE_FORMAT,
)

PLANNER_TEMPLATE = PromptTemplate(
    name="planner",
    role_tag=ROLE_PLANNER,
    role_description=PLANNER_ROLE_DESCRIPTION,
    system="Recipes (output <- inputs):\n{recipes}\n\nHarvest sources:\n{sources}",
    user="Goal: {goal}\nAlready solved: {solved}\nStarting inventory: {inventory}",
    response_format=PLANNER_RESPONSE_FORMAT,
)


# --- Environment documents -------------------------------------------------

def obs_info(env: MiniCraftEnv) -> str:
    """Observation fields scripts can read, generated from the live env."""
    lines = [
        f"rays: {env.num_rays} rays over the forward fan; each gives the first block hit and its distance "
        f"(\"air\"/infinity when nothing within {env.ray_range:g} cells) and the first entity before it",
        "voxels: 3x3 block names around the agent (\"void\" outside the world)",
        f"inventory: {env.slots} slots of item names with counts; use `count ITEM` or `has ITEM [N]`",
    ]
    numeric = [f for f in FIELDS if f not in STRING_FIELDS]
    lines.append("numeric fields: " + ", ".join(numeric))
    lines.append("string fields: " + ", ".join(STRING_FIELDS))
    lines.append("distances are infinite when the target is not in view; bearings run from "
                 f"-{env.num_rays // 2} (leftmost ray) to {env.num_rays // 2} (rightmost ray)")
    return "\n".join(lines)


def act_info(env: MiniCraftEnv, space=None) -> str:
    cards = space.cardinalities if space is not None else env.cardinalities
    recipes = ", ".join(f"{i}: {r.output}" for i, r in enumerate(env.data.recipes))
    lines = [
        f"MultiDiscrete({list(cards)})",
        "Index 0; forward and back; 0: noop, 1: forward, 2: back",
        "Index 1; move left and right; 0: noop, 1: left, 2: right",
        "Index 2; jump; 0: noop, 1: jump",
        f"Index 3; yaw delta; {env.yaw_bins} bins of {360 // env.yaw_bins} degrees, {env.yaw_bins // 2} is no turn",
        "Index 4; functional; " + ", ".join(f"{i}: {n}" for i, n in enumerate(FUNCTIONAL_ACTIONS)),
        f"Index 5; craft argument; {recipes}",
        "Index 6; place/destroy argument; inventory slot index",
    ]
    if space is not None and space.macros:
        lines.extend(space.describe()[len(FUNCTIONAL_ACTIONS):])
    return "\n".join(lines)


def programs_template() -> str:
    return (
        "primitives: " + ", ".join(SIMPLE_PRIMITIVES) + "; " + ", ".join(f"{p} ITEM" for p in ITEM_PRIMITIVES)
        + "\n" + GRAMMAR_SUMMARY
    )


def load_code_examples(path=None) -> List[dict]:
    path = Path(path or CODE_EXAMPLES_PATH)
    try:
        examples = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read code examples {path}: {e}") from e
    return list(examples)


def format_examples(examples: Sequence[dict]) -> str:
    blocks = []
    for ex in examples:
        blocks.append(f"# {ex['description']}\n```actionscript\n{ex['code'].rstrip()}\n```")
    return "\n\n".join(blocks)


@dataclass
class ContextBundle:
    """Environment documents and code examples handed to the agents."""

    obs_info: str
    act_info: str
    examples: List[dict] = field(default_factory=list)

    @classmethod
    def from_env(cls, env: MiniCraftEnv, space=None, examples: Optional[List[dict]] = None) -> "ContextBundle":
        return cls(obs_info(env), act_info(env, space), examples if examples is not None else load_code_examples())

    def refresh(self, env: MiniCraftEnv, space=None) -> None:
        self.obs_info = obs_info(env)
        self.act_info = act_info(env, space)


# --- Renderers ---------------------------------------------------------------

def render_slow(task_text: str, context: str, critiques: Sequence[str], ctx: ContextBundle,
                tips: bool) -> List[Dict[str, str]]:
    return SLOW_TEMPLATE.render(
        task=task_text,
        context=context,
        critique="\n".join(critiques) if critiques else "none yet",
        programs=format_examples(ctx.examples),
        planning_tips=("Important tips:\n" + PLANNING_TIPS) if tips else "",
    )


def render_fast(sub_action: str, context: str, ctx: ContextBundle, last_code: str = "",
                execution_error: str = "", critique: str = "") -> List[Dict[str, str]]:
    return FAST_TEMPLATE.render(
        programs_template=programs_template(),
        programs_example=format_examples(ctx.examples),
        obs_info=ctx.obs_info,
        act_info=ctx.act_info,
        task=sub_action,
        context=context,
        last_code=last_code or "none",
        execution_error=execution_error or "none",
        critique=critique or "none",
    )


def render_critic(action: str, status: str, steps: int, before: str, after: str) -> List[Dict[str, str]]:
    return CRITIC_TEMPLATE.render(action=action, status=status, steps=steps, before=before, after=after)


def render_planner(goal: str, solved: Sequence[str], inventory: Dict[str, int], data: GameData) -> List[Dict[str, str]]:
    recipes = "\n".join(
        f"{r.output} x{r.count} <- " + ", ".join(f"{n} x{c}" for n, c in r.inputs)
        + (" (needs crafting_table nearby)" if r.needs_table else "")
        for r in data.recipes
    )
    sources = "\n".join(
        f"{s.item} <- {s.via} {s.source}" + (f" holding {s.tool}" if s.tool else "") for s in data.sources
    )
    return PLANNER_TEMPLATE.render(
        recipes=recipes,
        sources=sources,
        goal=goal,
        solved=", ".join(solved) if solved else "nothing",
        inventory=json.dumps(inventory, sort_keys=True),
    )
