import dataclasses
import json
import math
from collections import Counter

import numpy as np
import pytest

from errors import ConfigError, ContractViolation
from minicraft import (
    CELL_INDEX,
    CELL_KINDS,
    FN_ATTACK,
    FN_CRAFT,
    FUNCTIONAL_ACTIONS,
    MiniCraftEnv,
    Mob,
    MultiDiscreteAction,
    RayHit,
    TaskSpec,
    get_task,
    recipe_table,
    yaw_quarter_turns,
)

ATTACK = MultiDiscreteAction(functional=FN_ATTACK)
NOOP = MultiDiscreteAction()


def field_task(item="log", max_steps=200, inventory=()):
    return TaskSpec("Field", item, 1, max_steps, tuple(inventory), "empty", f"obtain {item}")


def facing_east(env, task):
    env.reset(task, 0)
    env.state.agent_yaw = 1
    env.observation = env.observe()
    return env


def put_block(env, kind, dx, dy=0):
    x, y = env.state.agent_pos
    env.state.grid[y + dy, x + dx] = CELL_INDEX[kind]
    env.state.durability[y + dy, x + dx] = env.data.durability.get(kind, 0)
    env.observation = env.observe()


def test_task_roster(data):
    assert {"HarvestLog", "HarvestCobblestone", "StonePickaxe", "Bed", "Wool"} <= set(data.tasks)
    log = get_task("HarvestLog", data)
    assert (log.target_item, log.max_steps, log.biome) == ("log", 200, "forest")
    with pytest.raises(ConfigError):
        get_task("ObtainDiamond", data)


def test_reset_is_deterministic_per_seed(data):
    a, b = MiniCraftEnv(data), MiniCraftEnv(data)
    a.reset("HarvestLog", 7)
    b.reset("HarvestLog", 7)
    assert np.array_equal(a.state.grid, b.state.grid)
    assert a.state.agent_yaw == b.state.agent_yaw
    assert a.observation == b.observation
    b.reset("HarvestLog", 8)
    assert not np.array_equal(a.state.grid, b.state.grid)


def test_agent_spawns_in_the_middle_on_air(data):
    env = MiniCraftEnv(data)
    for seed in range(5):
        env.reset("HarvestLog", seed)
        x, y = env.state.agent_pos
        assert (x, y) == (env.width // 2, env.height // 2)
        assert env.state.cell(x, y) == "air"


def test_twenty_uninterrupted_hits_fell_a_tree(data):
    env = facing_east(MiniCraftEnv(data), field_task())
    put_block(env, "tree", 1)
    for _ in range(19):
        env.step(ATTACK)
    assert env.observation.count("log") == 0
    _, obs, done, events = env.step(ATTACK)
    assert obs.count("log") == 1
    assert done and env.success
    assert {"event": "task_complete", "item": "log"} in events


def test_any_other_action_resets_mining(data):
    env = facing_east(MiniCraftEnv(data), field_task())
    put_block(env, "tree", 1)
    for _ in range(10):
        env.step(ATTACK)
    env.step(NOOP)
    x, y = env.state.front_cell()
    assert env.state.durability[y, x] == 20
    for _ in range(10):
        env.step(ATTACK)
    assert env.observation.count("log") == 0


def test_stone_needs_a_pickaxe(data):
    env = facing_east(MiniCraftEnv(data), field_task("cobblestone"))
    put_block(env, "stone", 1)
    _, _, _, events = env.step(ATTACK)
    assert events == [{"event": "needs_tool", "tool": "wooden_pickaxe", "block": "stone"}]


def test_crafting_consumes_inputs_and_respects_the_table(data):
    env = facing_east(MiniCraftEnv(data), field_task("stick", inventory=(("log", 1),)))
    env.step(MultiDiscreteAction(functional=FN_CRAFT, craft_arg=data.recipe_index("planks")))
    assert env.state.inventory == {"planks": 4}
    _, _, _, events = env.step(MultiDiscreteAction(functional=FN_CRAFT, craft_arg=data.recipe_index("wooden_pickaxe")))
    assert events[0] == {"event": "craft_failed", "item": "wooden_pickaxe", "reason": "no_table"}
    _, _, done, _ = env.step(MultiDiscreteAction(functional=FN_CRAFT, craft_arg=data.recipe_index("stick")))
    assert env.state.inventory == {"planks": 2, "stick": 4}
    assert done and env.success


def test_middle_ray_measures_distance_ahead(data):
    env = facing_east(MiniCraftEnv(data), field_task())
    assert env.observation.nearest("tree") == (float("inf"), None)
    put_block(env, "tree", 3)
    middle = env.num_rays // 2
    ray = env.observation.rays[middle]
    assert ray.block_name == "tree"
    assert ray.block_distance == pytest.approx(3.0)
    assert env.observation.nearest("tree") == (pytest.approx(3.0), middle)
    assert env.observation.front_block() == "air"
    assert env.ray_cast(env.state) == env.observation.rays


def test_diagonal_ray_reaches_the_diagonal_neighbour(data):
    env = facing_east(MiniCraftEnv(data), field_task())
    put_block(env, "tree", 1, 1)
    ray = env.observation.rays[-1]
    assert (ray.block_name, ray.block_distance) == ("tree", pytest.approx(math.sqrt(2)))
    assert env.observation.rays[0].block_name == "air"


def cells_crossed_by_ray(px, py, dx, dy, reach):
    """Every cell the ray passes through for a positive length, nearest entry first."""
    crossed = []
    span = int(reach) + 2
    for cy in range(py - span, py + span + 1):
        for cx in range(px - span, px + span + 1):
            if (cx, cy) == (px, py):
                continue
            lo, hi = 0.0, math.inf
            for offset, d in ((cx - px, dx), (cy - py, dy)):
                if d == 0:
                    if offset != 0:
                        lo, hi = 1.0, 0.0
                    continue
                a, b = (offset - 0.5) / d, (offset + 0.5) / d
                lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
            if lo < hi and lo < reach:
                crossed.append((lo, cx, cy))
    return [(cx, cy) for _, cx, cy in sorted(crossed)]


def brute_force_rays(env, st):
    h, w = st.grid.shape
    px, py = st.agent_pos
    mobs = {(m.x, m.y): m.kind for m in st.mobs}
    hits = []
    for dx, dy in env.ray_directions[st.agent_yaw]:
        block, entity = ("air", math.inf), ("none", math.inf)
        for cx, cy in cells_crossed_by_ray(px, py, dx, dy, env.ray_range):
            if not (0 <= cx < w and 0 <= cy < h):
                break
            dist = math.sqrt((cx - px) ** 2 + (cy - py) ** 2)
            name = CELL_KINDS[int(st.grid[cy, cx])]
            if name != "air":
                block = (name, dist)
                break
            if entity[0] == "none" and (cx, cy) in mobs:
                entity = (mobs[(cx, cy)], dist)
        hits.append(RayHit(block[0], block[1], entity[0], entity[1]))
    return tuple(hits)


def test_ray_cast_matches_a_brute_force_cell_walk(data):
    env = MiniCraftEnv(data)
    env.reset(field_task(), 0)
    solid_seen = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(3, 20)), int(rng.integers(3, 20))
        density = float(rng.uniform(0.0, 0.4))
        grid = np.where(rng.random((h, w)) < density, rng.integers(1, len(CELL_KINDS), (h, w)), 0).astype(np.int8)
        px, py = int(rng.integers(w)), int(rng.integers(h))
        grid[py, px] = CELL_INDEX["air"]
        free = [(x, y) for y in range(h) for x in range(w) if grid[y, x] == 0 and (x, y) != (px, py)]
        picks = rng.permutation(len(free))[: int(rng.integers(0, 6))]
        mobs = [Mob(kind=("cow", "sheep")[int(rng.integers(2))], x=free[i][0], y=free[i][1], health=3) for i in picks]
        st = dataclasses.replace(env.state, grid=grid, agent_pos=(px, py), agent_yaw=int(rng.integers(4)), mobs=mobs)

        got = env.ray_cast(st)
        assert got == brute_force_rays(env, st), f"seed {seed}"
        solid_seen += sum(r.block_name != "air" for r in got)
    assert solid_seen > 500


def test_harvest_and_crafting_conserve_items(data):
    fast = dataclasses.replace(data, durability={"tree": 2, "stone": 2})
    env = MiniCraftEnv(fast)
    task = TaskSpec("Sandbox", "bed", 99, 300,
                    (("log", 4), ("wooden_pickaxe", 1), ("crafting_table", 1), ("iron_ingot", 5)),
                    "forest_hills", "sandbox")
    source_items = {s.item for s in fast.sources if s.source in CELL_INDEX}
    recipes = {r.output: dict(r.inputs) for r in fast.recipes}
    broken_total = crafted_total = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        env.reset(task, seed)
        done = False
        while not done:
            action = MultiDiscreteAction(
                move=int(rng.choice(3, p=[0.7, 0.2, 0.1])),
                strafe=int(rng.choice(3, p=[0.8, 0.1, 0.1])),
                yaw_delta=int(rng.choice([2, 4, 6], p=[0.1, 0.8, 0.1])),
                functional=int(rng.choice(len(FUNCTIONAL_ACTIONS), p=[0.05, 0.1, 0.5, 0.2, 0.1, 0.05])),
                craft_arg=int(rng.integers(len(fast.recipes))),
                slot_arg=int(rng.integers(4)),
            )
            before = dict(env.state.inventory)
            solid_before = int(np.count_nonzero(env.state.grid))
            _, _, done, events = env.step(action)
            after = env.state.inventory

            expected = Counter()
            for e in events:
                if e["event"] == "obtained":
                    expected[e["item"]] += e["count"]
                elif e["event"] == "crafted":
                    assert e["consumed"] == recipes[e["item"]]
                    for name, n in e["consumed"].items():
                        expected[name] -= n
                    crafted_total += 1
                elif e["event"] == "consumed":
                    expected[e["item"]] -= e["count"]
                elif e["event"] == "placed":
                    expected[e["item"]] -= 1
                elif e["event"] == "destroyed":
                    expected[e["item"]] -= e["count"]
            for item in set(before) | set(after) | set(expected):
                delta = expected[item]
                assert after.get(item, 0) - before.get(item, 0) == delta, (seed, item, events)

            broken = [tuple(e["cell"]) for e in events if e["event"] == "block_broken"]
            harvested = [tuple(e["cell"]) for e in events if e["event"] == "obtained" and e["item"] in source_items]
            assert harvested == broken
            placed = sum(e["event"] == "placed" for e in events)
            assert int(np.count_nonzero(env.state.grid)) == solid_before - len(broken) + placed
            broken_total += len(broken)
    assert broken_total > 0
    assert crafted_total > 0


def test_recipe_table(data):
    recipes = {r.output: r for r in recipe_table(data)}
    assert recipes["wooden_pickaxe"].inputs == (("planks", 3), ("stick", 2))
    assert recipes["wooden_pickaxe"].needs_table
    assert not recipes["planks"].needs_table
    assert recipes["planks"].count == 4


def test_yaw_bins_map_to_quarter_turns():
    assert yaw_quarter_turns(4, 8) == 0
    assert yaw_quarter_turns(6, 8) == 1
    assert yaw_quarter_turns(2, 8) == -1
    assert yaw_quarter_turns(0, 8) == -2
    assert yaw_quarter_turns(5, 8) == 0


def test_episode_ends_at_max_steps(data):
    env = facing_east(MiniCraftEnv(data), field_task(max_steps=3))
    for _ in range(3):
        _, _, done, _ = env.step(NOOP)
    assert done and not env.success
    with pytest.raises(ContractViolation):
        env.step(NOOP)


def test_invalid_action_component_is_rejected(data):
    env = facing_east(MiniCraftEnv(data), field_task())
    with pytest.raises(ContractViolation):
        env.step(MultiDiscreteAction(move=3))
    with pytest.raises(ContractViolation):
        env.step((0, 0, 0))


def test_snapshot_line_is_one_json_record(data, tmp_path):
    env = MiniCraftEnv(data)
    env.reset("HarvestLog", 3)
    record = json.loads(env.snapshot_line())
    assert record["task_id"] == "HarvestLog"
    assert record["seed"] == 3
    assert len(record["grid"]) == env.height
    path = tmp_path / "snapshots.jsonl"
    env.export_snapshot(path)
    env.export_snapshot(path)
    assert len(path.read_text(encoding="utf-8").splitlines()) == 2
