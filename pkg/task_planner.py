"""Long-horizon goals as chains of subtasks ordered by the recipe graph."""

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import prompts
from backends import ChatBackend
from errors import BackendError, PlannerError
from minicraft import GameData, TaskSpec, load_game_data
from state import RunReport

logger = logging.getLogger(__name__)

_ORDER_LINE = re.compile(r"^\s*\d+[.)]\s*([a-z_]+)", re.IGNORECASE)


def prerequisites(item: str, data: GameData) -> List[str]:
    """Items needed before `item` can be obtained: recipe inputs, table, harvesting tool."""
    recipe = data.lookup_recipe(item)
    if recipe is not None:
        needs = [name for name, _ in recipe.inputs]
        if recipe.needs_table:
            needs.append("crafting_table")
        return needs
    source = data.source_for(item)
    if source is not None:
        return [source.tool] if source.tool else []
    raise PlannerError(f"'{item}' has no recipe and no harvest source")


def dependency_order(target: str, data: GameData, solved: Iterable[str] = ()) -> List[str]:
    """Depth-first post-order over the recipe graph; solved items are leaves and are left out."""
    solved = set(solved)
    order: List[str] = []
    state: Dict[str, str] = {}  # grey while on the stack, black when emitted

    def visit(item: str, path: List[str]) -> None:
        if item in solved or state.get(item) == "black":
            return
        if state.get(item) == "grey":
            cycle = path[path.index(item):] + [item]
            raise PlannerError("cyclic dependency: " + " -> ".join(cycle))
        state[item] = "grey"
        for need in prerequisites(item, data):
            visit(need, path + [item])
        state[item] = "black"
        order.append(item)

    visit(target, [])
    return order


def demand(order: Sequence[str], goal: TaskSpec, data: GameData) -> Dict[str, int]:
    """How many of each item the chain has to hold, walking consumers before producers."""
    need: Counter = Counter({goal.target_item: goal.target_count})
    for item in reversed(order):
        n = need[item]
        recipe = data.lookup_recipe(item)
        if recipe is not None:
            crafts = math.ceil(n / recipe.count)
            for name, count in recipe.inputs:
                need[name] += crafts * count
            if recipe.needs_table:
                need["crafting_table"] = max(need["crafting_table"], 1)
            continue
        source = data.source_for(item)
        if source is not None and source.tool:
            need[source.tool] = max(need[source.tool], 1)
    return dict(need)


def is_valid_order(order: Sequence[str], target: str, data: GameData, solved: Iterable[str] = ()) -> bool:
    solved = set(solved)
    expected = set(dependency_order(target, data, solved))
    if set(order) != expected or len(order) != len(expected):
        return False
    seen = set(solved)
    for item in order:
        if any(need not in seen for need in prerequisites(item, data)):
            return False
        seen.add(item)
    return True


def parse_order(text: str) -> List[str]:
    return [m.group(1).lower() for m in map(_ORDER_LINE.match, (text or "").splitlines()) if m]


def llm_order(goal: TaskSpec, solved: Iterable[str], backend: ChatBackend, data: GameData) -> List[str]:
    """The planner agent's order when it respects the recipe graph, else the graph order."""
    solved = set(solved)
    fallback = dependency_order(goal.target_item, data, solved)
    try:
        reply = backend.complete(
            prompts.render_planner(goal.prompt or goal.target_item, sorted(solved), goal.initial_inventory_dict(), data)
        )
    except BackendError as e:
        logger.warning("Planner backend failed (%s); using the recipe-graph order", e)
        return fallback
    proposed = parse_order(reply)
    if is_valid_order(proposed, goal.target_item, data, solved):
        return proposed
    logger.warning("Planner order %s breaks the recipe graph; using %s", proposed, fallback)
    return fallback


def task_planner(goal: TaskSpec, solved: Iterable[str] = (), backend: Optional[ChatBackend] = None,
                 data: Optional[GameData] = None) -> List[TaskSpec]:
    """Ordered subtasks for `goal`; solved items and the starting inventory are skipped."""
    data = data or load_game_data()
    done = set(solved) | {k for k, v in goal.initial_inventory if v > 0}
    if goal.target_item in set(solved):
        return []
    order = llm_order(goal, done, backend, data) if backend is not None else dependency_order(goal.target_item, data, done)
    counts = demand(order, goal, data)
    by_item = {t.target_item: t for t in data.tasks.values()}
    subtasks = []
    for item in order:
        registered = by_item.get(item)
        subtasks.append(TaskSpec(
            task_id=f"{goal.task_id}/{item}",
            target_item=item,
            target_count=counts.get(item, 1),
            max_steps=registered.max_steps if registered else goal.max_steps,
            initial_inventory=goal.initial_inventory,
            biome=goal.biome,
            prompt=f"obtain {counts.get(item, 1)} {item.replace('_', ' ')}",
        ))
    return subtasks


# ---------------------- chain runner ---------------------- #
@dataclass
class ChainReport:
    goal: str
    status: str  # solved | failed
    subtasks: List[dict] = field(default_factory=list)
    frames: int = 0

    def to_dict(self) -> dict:
        return {"goal": self.goal, "status": self.status, "subtasks": list(self.subtasks), "frames": self.frames}


def hand_over(inventory: Dict[str, int], task: TaskSpec, data: GameData) -> Dict[str, int]:
    """Inventory after a solved subtask: its target is held and crafted inputs are spent."""
    inv = Counter(inventory)
    have = inv[task.target_item]
    if have < task.target_count:
        recipe = data.lookup_recipe(task.target_item)
        if recipe is not None:
            crafts = math.ceil((task.target_count - have) / recipe.count)
            for name, count in recipe.inputs:
                inv[name] = max(inv[name] - crafts * count, 0)
        inv[task.target_item] = task.target_count
    return {k: v for k, v in inv.items() if v > 0}


def run_chain(goal: TaskSpec, run_subtask: Callable[[TaskSpec], RunReport], solved: Iterable[str] = (),
              backend: Optional[ChatBackend] = None, data: Optional[GameData] = None) -> ChainReport:
    """Run the planned subtasks in order, each through its own two-loop run."""
    data = data or load_game_data()
    chain = task_planner(goal, solved, backend, data)
    report = ChainReport(goal=goal.task_id, status="solved")
    inventory = goal.initial_inventory_dict()
    for subtask in chain:
        subtask = subtask.with_inventory(inventory)
        logger.info("Chain %s: subtask %s (inventory %s)", goal.task_id, subtask.task_id, inventory)
        result = run_subtask(subtask)
        report.frames += result.frames
        report.subtasks.append({
            "task_id": subtask.task_id,
            "item": subtask.target_item,
            "target_count": subtask.target_count,
            "status": result.status,
            "success": result.final_success,
        })
        if result.status != "solved":
            report.status = "failed"
            logger.info("Chain %s stopped at %s", goal.task_id, subtask.task_id)
            break
        inventory = hand_over(inventory, subtask, data)
    return report
