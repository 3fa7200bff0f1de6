from dataclasses import replace

import pytest

from backends import ScriptedBackend
from errors import PlannerError
from minicraft import Recipe, get_task
from state import RunReport
from task_planner import (
    demand,
    dependency_order,
    hand_over,
    is_valid_order,
    llm_order,
    parse_order,
    prerequisites,
    run_chain,
    task_planner,
)

FULL_ORDER = ["log", "planks", "stick", "crafting_table", "wooden_pickaxe", "cobblestone", "stone_pickaxe"]


def planner_backend(reply):
    return ScriptedBackend.from_dict({"roles": {"planner": [{"reply": reply}]}})


def report(status, frames=100):
    return RunReport("r", "t", status, 1.0 if status == "solved" else 0.0, {}, [], frames, 0.0, 0.0)


def test_dependency_order_from_scratch(data):
    assert dependency_order("stone_pickaxe", data) == FULL_ORDER
    assert dependency_order("stone_pickaxe", data, solved={"wooden_pickaxe"}) == [
        "cobblestone", "log", "planks", "stick", "crafting_table", "stone_pickaxe",
    ]
    assert prerequisites("milk_bucket", data) == ["bucket"]
    with pytest.raises(PlannerError):
        prerequisites("diamond", data)


def test_cycles_are_reported(data):
    cyclic = replace(data, recipes=(Recipe("a", 1, (("b", 1),), False), Recipe("b", 1, (("a", 1),), False)))
    with pytest.raises(PlannerError, match="a -> b -> a"):
        dependency_order("a", cyclic)


def test_demand_walks_consumers_first(data):
    counts = demand(FULL_ORDER, get_task("StonePickaxe", data), data)
    assert counts == {
        "stone_pickaxe": 1, "cobblestone": 3, "stick": 4, "crafting_table": 1,
        "wooden_pickaxe": 1, "planks": 11, "log": 3,
    }


def test_order_validation(data):
    assert is_valid_order(FULL_ORDER, "stone_pickaxe", data)
    swapped = ["planks", "log"] + FULL_ORDER[2:]
    assert not is_valid_order(swapped, "stone_pickaxe", data)
    assert not is_valid_order(FULL_ORDER[1:], "stone_pickaxe", data)
    assert not is_valid_order(FULL_ORDER + ["log"], "stone_pickaxe", data)


def test_parse_order():
    assert parse_order("Order:\n1) log\n2. Planks\nthen craft\n3) stick - two of them") == ["log", "planks", "stick"]


def test_llm_order_is_kept_only_when_valid(data):
    goal = get_task("StonePickaxe", data)
    solved = {"wooden_pickaxe"}
    own = ["log", "planks", "stick", "crafting_table", "cobblestone", "stone_pickaxe"]
    reply = "Order:\n" + "\n".join(f"{i}) {item}" for i, item in enumerate(own, 1))
    assert llm_order(goal, solved, planner_backend(reply), data) == own
    fallback = dependency_order("stone_pickaxe", data, solved)
    assert llm_order(goal, solved, planner_backend("Order:\n1) stone_pickaxe"), data) == fallback
    outage = ScriptedBackend.from_dict({"roles": {"planner": [{"error": "timeout"}]}})
    assert llm_order(goal, solved, outage, data) == fallback


def test_task_planner_builds_counted_subtasks(data):
    goal = get_task("StonePickaxe", data)
    chain = task_planner(goal, data=data)
    assert [(t.target_item, t.target_count) for t in chain] == [
        ("cobblestone", 3), ("log", 2), ("planks", 6), ("stick", 2), ("crafting_table", 1), ("stone_pickaxe", 1),
    ]
    assert chain[0].task_id == "StonePickaxe/cobblestone"
    assert chain[2].max_steps == goal.max_steps
    assert chain[1].max_steps == get_task("HarvestLog", data).max_steps
    assert task_planner(goal, solved=["stone_pickaxe"], data=data) == []


def test_hand_over_spends_crafting_inputs(data):
    planks = get_task("StonePickaxe", data)
    planks = replace(planks, target_item="planks", target_count=6)
    assert hand_over({"log": 2, "wooden_pickaxe": 1}, planks, data) == {"planks": 6, "wooden_pickaxe": 1}
    assert hand_over({"planks": 8}, planks, data) == {"planks": 8}


def test_run_chain_hands_inventory_forward_and_stops_on_failure(data):
    seen = []

    def run_subtask(task):
        seen.append(task)
        return report("budget-exhausted" if task.target_item == "stick" else "solved")

    chain = run_chain(get_task("StonePickaxe", data), run_subtask, data=data)
    assert chain.status == "failed"
    assert [s["item"] for s in chain.subtasks] == ["cobblestone", "log", "planks", "stick"]
    assert chain.frames == 400
    assert seen[3].initial_inventory_dict() == {"wooden_pickaxe": 1, "cobblestone": 3, "planks": 6}


def test_run_chain_solves_every_subtask(data):
    chain = run_chain(get_task("Stick", data), lambda task: report("solved"), data=data)
    assert chain.status == "solved"
    assert [s["item"] for s in chain.subtasks] == ["log", "planks", "stick"]
    assert chain.to_dict()["frames"] == 300
