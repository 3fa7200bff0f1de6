# minicraft.py - seeded 2-D crafting gridworld.
# Responsibilities:
#   - Load task presets, biomes, recipes and harvest sources from minicraft_data.json.
#   - Generate worlds per biome preset from a 64-bit seed.
#   - Step the multi-discrete action interface (move, strafe, jump, yaw bins, functional, args).
#   - Build symbolic observations: ray fan, 3x3 voxels, 36-slot inventory, pose.
#   - Export world snapshots as one JSON line each for debugging.

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import GAME_DATA_PATH
from errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

AIR = "air"
CELL_KINDS = ("air", "tree", "stone", "water", "crafting_table", "furnace")
CELL_INDEX = {name: i for i, name in enumerate(CELL_KINDS)}
MOB_KINDS = ("cow", "sheep")
MOB_DROPS = {"cow": "beef", "sheep": "mutton"}
NO_ENTITY = "none"
OUT_OF_BOUNDS = "void"
INFINITY = math.inf

FUNCTIONAL_ACTIONS = ("noop", "use", "attack", "craft", "place", "destroy")
FN_NOOP, FN_USE, FN_ATTACK, FN_CRAFT, FN_PLACE, FN_DESTROY = range(6)

# yaw 0 north, 1 east, 2 south, 3 west; y grows downwards
HEADINGS = ((0, -1), (1, 0), (0, 1), (-1, 0))
HEADING_NAMES = ("north", "east", "south", "west")


# ---------------------- game data ---------------------- #
@dataclass(frozen=True)
class Recipe:
    output: str
    count: int
    inputs: Tuple[Tuple[str, int], ...]
    needs_table: bool

    def input_dict(self) -> Dict[str, int]:
        return dict(self.inputs)


@dataclass(frozen=True)
class HarvestSource:
    item: str
    source: str
    via: str
    tool: Optional[str]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    target_item: str
    target_count: int
    max_steps: int
    initial_inventory: Tuple[Tuple[str, int], ...]
    biome: str
    prompt: str = ""

    def initial_inventory_dict(self) -> Dict[str, int]:
        return dict(self.initial_inventory)

    def with_inventory(self, inventory: Dict[str, int]) -> "TaskSpec":
        items = tuple((k, int(v)) for k, v in inventory.items() if v > 0)
        return replace(self, initial_inventory=items)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "target_item": self.target_item,
            "target_count": self.target_count,
            "max_steps": self.max_steps,
            "initial_inventory": self.initial_inventory_dict(),
            "biome": self.biome,
            "prompt": self.prompt,
        }


@dataclass(frozen=True)
class GameData:
    world: Dict[str, float]
    durability: Dict[str, int]
    biomes: Dict[str, dict]
    recipes: Tuple[Recipe, ...]
    sources: Tuple[HarvestSource, ...]
    placeable: Tuple[str, ...]
    tasks: Dict[str, TaskSpec]

    @property
    def items(self) -> Tuple[str, ...]:
        names = set(self.placeable)
        for r in self.recipes:
            names.add(r.output)
            names.update(name for name, _ in r.inputs)
        for s in self.sources:
            names.add(s.item)
            if s.tool:
                names.add(s.tool)
        return tuple(sorted(names))

    def lookup_recipe(self, item: str) -> Optional[Recipe]:
        for recipe in self.recipes:
            if recipe.output == item:
                return recipe
        return None

    def recipe_index(self, item: str) -> Optional[int]:
        for i, recipe in enumerate(self.recipes):
            if recipe.output == item:
                return i
        return None

    def source_for(self, item: str) -> Optional[HarvestSource]:
        for s in self.sources:
            if s.item == item:
                return s
        return None

    def make_task(self, record: dict) -> TaskSpec:
        task = TaskSpec(
            task_id=record["task_id"],
            target_item=record["target_item"],
            target_count=int(record.get("target_count", 1)),
            max_steps=int(record["max_steps"]),
            initial_inventory=tuple(sorted((record.get("initial_inventory") or {}).items())),
            biome=record["biome"],
            prompt=record.get("prompt", ""),
        )
        self.validate_task(task)
        return task

    def validate_task(self, task: TaskSpec) -> None:
        if task.max_steps <= 0:
            raise ConfigError(f"task {task.task_id}: max_steps must be positive")
        if task.target_count <= 0:
            raise ConfigError(f"task {task.task_id}: target_count must be positive")
        if task.target_item not in self.items:
            raise ConfigError(f"task {task.task_id}: unknown target item '{task.target_item}'")
        if task.biome not in self.biomes:
            raise ConfigError(f"task {task.task_id}: unknown biome '{task.biome}'")


def _parse_game_data(raw: dict) -> GameData:
    recipes = tuple(
        Recipe(
            output=r["output"],
            count=int(r["count"]),
            inputs=tuple(sorted((k, int(v)) for k, v in r["inputs"].items())),
            needs_table=bool(r["needs_table"]),
        )
        for r in raw["recipes"]
    )
    sources = tuple(
        HarvestSource(item=s["item"], source=s["from"], via=s["via"], tool=s.get("tool"))
        for s in raw["sources"]
    )
    data = GameData(
        world=dict(raw["world"]),
        durability={k: int(v) for k, v in raw["durability"].items()},
        biomes={b["name"]: b for b in raw["biomes"]},
        recipes=recipes,
        sources=sources,
        placeable=tuple(raw.get("placeable", [])),
        tasks={},
    )
    for record in raw["tasks"]:
        task = data.make_task(record)
        data.tasks[task.task_id] = task
    return data


@lru_cache(maxsize=8)
def _load_cached(path: str) -> GameData:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read game data {path}: {e}") from e
    return _parse_game_data(raw)


def load_game_data(path=None) -> GameData:
    return _load_cached(str(path or GAME_DATA_PATH))


def recipe_table(data: Optional[GameData] = None) -> List[Recipe]:
    return list((data or load_game_data()).recipes)


def lookup_recipe(item: str, data: Optional[GameData] = None) -> Optional[Recipe]:
    return (data or load_game_data()).lookup_recipe(item)


def get_task(task_id: str, data: Optional[GameData] = None) -> TaskSpec:
    data = data or load_game_data()
    if task_id not in data.tasks:
        raise ConfigError(f"unknown task '{task_id}'")
    return data.tasks[task_id]


# ---------------------- actions ---------------------- #
@dataclass(frozen=True)
class MultiDiscreteAction:
    move: int = 0
    strafe: int = 0
    jump: int = 0
    yaw_delta: int = 4
    functional: int = 0
    craft_arg: int = 0
    slot_arg: int = 0

    def to_vector(self) -> Tuple[int, ...]:
        return (self.move, self.strafe, self.jump, self.yaw_delta, self.functional, self.craft_arg, self.slot_arg)

    @classmethod
    def from_vector(cls, vec: Sequence[int]) -> "MultiDiscreteAction":
        if len(vec) != 7:
            raise ContractViolation(f"action vector needs 7 components, got {len(vec)}")
        return cls(*(int(v) for v in vec))

    def validate(self, cardinalities: Sequence[int]) -> None:
        for name, value, card in zip(ACTION_FIELDS, self.to_vector(), cardinalities):
            if not 0 <= value < card:
                raise ContractViolation(f"action component {name}={value} outside [0, {card})")


ACTION_FIELDS = ("move", "strafe", "jump", "yaw_delta", "functional", "craft_arg", "slot_arg")


def yaw_quarter_turns(yaw_bin: int, yaw_bins: int) -> int:
    """Camera bins are 360/yaw_bins degrees apart around a neutral middle bin.

    The 2-D agent turns in whole quarter turns, truncating towards zero.
    """
    step = 360.0 / yaw_bins
    degrees = (yaw_bin - yaw_bins // 2) * step
    return int(degrees / 90.0)


# ---------------------- state and observations ---------------------- #
@dataclass
class Mob:
    kind: str
    x: int
    y: int
    health: int
    sheared: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x": self.x, "y": self.y, "health": self.health, "sheared": self.sheared}


@dataclass
class WorldState:
    grid: np.ndarray
    durability: np.ndarray
    agent_pos: Tuple[int, int]
    agent_yaw: int
    inventory: Dict[str, int]
    tick: int
    rng_seed: int
    mobs: List[Mob] = field(default_factory=list)
    mining: Optional[Tuple[int, int]] = None
    rng: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def cell(self, x: int, y: int) -> str:
        h, w = self.grid.shape
        if not (0 <= x < w and 0 <= y < h):
            return OUT_OF_BOUNDS
        return CELL_KINDS[self.grid[y, x]]

    def mob_at(self, x: int, y: int) -> Optional[Mob]:
        for mob in self.mobs:
            if mob.x == x and mob.y == y:
                return mob
        return None

    def front_cell(self) -> Tuple[int, int]:
        dx, dy = HEADINGS[self.agent_yaw]
        return self.agent_pos[0] + dx, self.agent_pos[1] + dy

    def to_record(self) -> dict:
        rows = ["".join(str(v) for v in row) for row in self.grid.tolist()]
        return {
            "tick": self.tick,
            "seed": self.rng_seed,
            "pos": list(self.agent_pos),
            "yaw": self.agent_yaw,
            "inventory": dict(self.inventory),
            "grid": rows,
            "durability": self.durability.tolist(),
            "mobs": [m.to_dict() for m in self.mobs],
            "mining": list(self.mining) if self.mining else None,
        }


@dataclass(frozen=True)
class RayHit:
    block_name: str
    block_distance: float
    entity_name: str
    entity_distance: float


@dataclass(frozen=True)
class Observation:
    rays: Tuple[RayHit, ...]
    voxels: Tuple[Tuple[str, str, str], ...]
    inventory_names: Tuple[str, ...]
    inventory: Dict[str, int]
    pos: Tuple[int, int]
    yaw: int
    tick: int

    def count(self, item: str) -> int:
        return self.inventory.get(item, 0)

    def front_block(self) -> str:
        dx, dy = HEADINGS[self.yaw]
        return self.voxels[1 + dy][1 + dx]

    def nearest(self, name: str) -> Tuple[float, Optional[int]]:
        """Least ray distance to a block or entity called `name`, and the ray index."""
        best, best_i = INFINITY, None
        for i, ray in enumerate(self.rays):
            if ray.block_name == name and ray.block_distance < best:
                best, best_i = ray.block_distance, i
            if ray.entity_name == name and ray.entity_distance < best:
                best, best_i = ray.entity_distance, i
        return best, best_i

    def to_dict(self) -> dict:
        return {
            "rays": [
                [r.block_name, _finite_or_none(r.block_distance), r.entity_name, _finite_or_none(r.entity_distance)]
                for r in self.rays
            ],
            "voxels": [list(row) for row in self.voxels],
            "inventory": dict(self.inventory),
            "pos": list(self.pos),
            "yaw": self.yaw,
            "tick": self.tick,
        }


def _finite_or_none(value: float):
    return None if math.isinf(value) else value


# ---------------------- environment ---------------------- #
class MiniCraftEnv:
    """One environment instance; drive it from a single caller at a time."""

    def __init__(self, data: Optional[GameData] = None):
        self.data = data or load_game_data()
        world = self.data.world
        self.width = int(world["width"])
        self.height = int(world["height"])
        self.num_rays = int(world["num_rays"])
        self.ray_range = float(world["ray_range"])
        self.yaw_bins = int(world["yaw_bins"])
        self.slots = int(world["inventory_slots"])
        self.mob_step_p = float(world["mob_step_probability"])
        self.mob_health = int(world["mob_health"])
        self.cardinalities = (3, 3, 2, self.yaw_bins, len(FUNCTIONAL_ACTIONS), len(self.data.recipes), self.slots)
        self.ray_directions = self._build_ray_directions(float(world["ray_fan_degrees"]))

        self.task: Optional[TaskSpec] = None
        self.state: Optional[WorldState] = None
        self.observation: Optional[Observation] = None
        self.done = True
        self.success = False

    def _build_ray_directions(self, fan_degrees: float) -> Tuple[Tuple[Tuple[float, float], ...], ...]:
        if self.num_rays == 1:
            offsets = [0.0]
        else:
            offsets = [-fan_degrees / 2 + i * fan_degrees / (self.num_rays - 1) for i in range(self.num_rays)]
        table = []
        for hx, hy in HEADINGS:
            dirs = []
            for deg in offsets:
                th = math.radians(deg)
                c, s = math.cos(th), math.sin(th)
                if deg == 0.0:
                    c, s = 1.0, 0.0
                # clockwise rotation in y-down screen coordinates
                dirs.append((hx * c - hy * s, hx * s + hy * c))
            table.append(tuple(dirs))
        return tuple(table)

    # --- episode control ---
    def reset(self, task, seed: int) -> Tuple[WorldState, Observation]:
        if isinstance(task, str):
            task = get_task(task, self.data)
        if task.biome not in self.data.biomes:
            raise ConfigError(f"unknown biome '{task.biome}'")
        self.data.validate_task(task)
        self.task = task
        self.state = self._generate(task, int(seed))
        self.success = self._target_met()
        self.done = self.success
        self.observation = self.observe()
        return self.state, self.observation

    def _generate(self, task: TaskSpec, seed: int) -> WorldState:
        seed64 = seed % (1 << 64)
        rng = np.random.default_rng(seed64)
        biome = self.data.biomes[task.biome]
        h, w = self.height, self.width
        u = rng.random((h, w))
        grid = np.zeros((h, w), dtype=np.int8)
        t = float(biome["tree"])
        s = t + float(biome["stone"])
        wa = s + float(biome["water"])
        grid[u < t] = CELL_INDEX["tree"]
        grid[(u >= t) & (u < s)] = CELL_INDEX["stone"]
        grid[(u >= s) & (u < wa)] = CELL_INDEX["water"]
        ax, ay = w // 2, h // 2
        grid[ay, ax] = CELL_INDEX[AIR]
        yaw = int(rng.integers(4))

        durability = np.zeros((h, w), dtype=np.int16)
        for kind, hits in self.data.durability.items():
            durability[grid == CELL_INDEX[kind]] = hits

        mobs: List[Mob] = []
        kinds = list(biome.get("mob_kinds", []))
        n_mobs = int(rng.binomial(h * w, float(biome["mobs"]))) if kinds else 0
        free = [(x, y) for y in range(h) for x in range(w) if grid[y, x] == 0 and (x, y) != (ax, ay)]
        if n_mobs and free:
            picks = rng.choice(len(free), size=min(n_mobs, len(free)), replace=False)
            for idx in picks:
                x, y = free[int(idx)]
                kind = kinds[int(rng.integers(len(kinds)))]
                mobs.append(Mob(kind=kind, x=x, y=y, health=self.mob_health))

        return WorldState(
            grid=grid,
            durability=durability,
            agent_pos=(ax, ay),
            agent_yaw=yaw,
            inventory={k: v for k, v in task.initial_inventory if v > 0},
            tick=0,
            rng_seed=seed,
            mobs=mobs,
            mining=None,
            rng=rng,
        )

    def _target_met(self) -> bool:
        return self.state.inventory.get(self.task.target_item, 0) >= self.task.target_count

    def step(self, action) -> Tuple[WorldState, Observation, bool, List[dict]]:
        if self.state is None:
            raise ContractViolation("step() before reset()")
        if self.done:
            raise ContractViolation("step() after the episode is done")
        if not isinstance(action, MultiDiscreteAction):
            action = MultiDiscreteAction.from_vector(action)
        action.validate(self.cardinalities)

        st = self.state
        events: List[dict] = []
        st.agent_yaw = (st.agent_yaw + yaw_quarter_turns(action.yaw_delta, self.yaw_bins)) % 4
        hx, hy = HEADINGS[st.agent_yaw]
        if action.move == 1:
            self._try_move(hx, hy)
        elif action.move == 2:
            self._try_move(-hx, -hy)
        if action.strafe:
            lx, ly = HEADINGS[(st.agent_yaw + (3 if action.strafe == 1 else 1)) % 4]
            self._try_move(lx, ly)

        fn = action.functional
        if fn != FN_ATTACK:
            self._reset_mining()
        if fn == FN_USE:
            self._use(events)
        elif fn == FN_ATTACK:
            self._attack(events)
        elif fn == FN_CRAFT:
            self._craft(action.craft_arg, events)
        elif fn == FN_PLACE:
            self._place(action.slot_arg, events)
        elif fn == FN_DESTROY:
            self._destroy(action.slot_arg, events)

        self._walk_mobs()
        st.tick += 1
        self.success = self._target_met()
        if self.success:
            events.append({"event": "task_complete", "item": self.task.target_item})
        self.done = self.success or st.tick >= self.task.max_steps
        self.observation = self.observe()
        return st, self.observation, self.done, events

    # --- dynamics ---
    def _free(self, x: int, y: int) -> bool:
        st = self.state
        return st.cell(x, y) == AIR and st.mob_at(x, y) is None

    def _try_move(self, dx: int, dy: int) -> None:
        x, y = self.state.agent_pos
        if self._free(x + dx, y + dy):
            self.state.agent_pos = (x + dx, y + dy)

    def _reset_mining(self) -> None:
        st = self.state
        if st.mining is None:
            return
        x, y = st.mining
        kind = st.cell(x, y)
        if kind in self.data.durability:
            st.durability[y, x] = self.data.durability[kind]
        st.mining = None

    def _has_tool(self, tool: Optional[str]) -> bool:
        if tool is None:
            return True
        if self.state.inventory.get(tool, 0) > 0:
            return True
        # a better pickaxe also works
        return tool == "wooden_pickaxe" and self.state.inventory.get("stone_pickaxe", 0) > 0

    def _attack(self, events: List[dict]) -> None:
        st = self.state
        x, y = st.front_cell()
        mob = st.mob_at(x, y)
        if mob is not None:
            self._reset_mining()
            mob.health -= 1
            events.append({"event": "hit_mob", "mob": mob.kind})
            if mob.health <= 0:
                st.mobs.remove(mob)
                self._add_item(MOB_DROPS[mob.kind], 1, events, cell=(x, y))
            return
        kind = st.cell(x, y)
        source = next((s for s in self.data.sources if s.source == kind and s.via == "attack"), None)
        if source is None:
            self._reset_mining()
            return
        if not self._has_tool(source.tool):
            self._reset_mining()
            events.append({"event": "needs_tool", "tool": source.tool, "block": kind})
            return
        if st.mining != (x, y):
            self._reset_mining()
            st.mining = (x, y)
        st.durability[y, x] -= 1
        if st.durability[y, x] <= 0:
            st.grid[y, x] = CELL_INDEX[AIR]
            st.durability[y, x] = 0
            st.mining = None
            events.append({"event": "block_broken", "block": kind, "cell": [x, y]})
            self._add_item(source.item, 1, events, cell=(x, y))

    def _use(self, events: List[dict]) -> None:
        st = self.state
        x, y = st.front_cell()
        mob = st.mob_at(x, y)
        if mob is None:
            return
        for s in self.data.sources:
            if s.via != "use" or s.source != mob.kind:
                continue
            if not self._has_tool(s.tool):
                continue
            if s.tool == "shears":
                if mob.sheared:
                    continue
                mob.sheared = True
            elif s.tool == "bucket":
                self._remove_item("bucket", 1)
                events.append({"event": "consumed", "item": "bucket", "count": 1})
            self._add_item(s.item, 1, events, cell=(x, y))
            return

    def _table_nearby(self) -> bool:
        x, y = self.state.agent_pos
        return any(
            self.state.cell(x + dx, y + dy) == "crafting_table"
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        )

    def _craft(self, index: int, events: List[dict]) -> None:
        st = self.state
        recipe = self.data.recipes[index]
        if recipe.needs_table and not self._table_nearby():
            events.append({"event": "craft_failed", "item": recipe.output, "reason": "no_table"})
            return
        for name, n in recipe.inputs:
            if st.inventory.get(name, 0) < n:
                events.append({"event": "craft_failed", "item": recipe.output, "reason": "missing_" + name})
                return
        after = dict(st.inventory)
        for name, n in recipe.inputs:
            after[name] -= n
        occupied = sum(1 for v in after.values() if v > 0)
        if recipe.output not in after or after[recipe.output] <= 0:
            if occupied >= self.slots:
                events.append({"event": "craft_failed", "item": recipe.output, "reason": "inventory_full"})
                return
        for name, n in recipe.inputs:
            self._remove_item(name, n)
        self._add_item(recipe.output, recipe.count, events)
        events.append({"event": "crafted", "item": recipe.output, "count": recipe.count,
                       "consumed": dict(recipe.inputs)})

    def _place(self, slot: int, events: List[dict]) -> None:
        st = self.state
        names = self._slot_names()
        item = names[slot]
        if item not in self.data.placeable:
            return
        x, y = st.front_cell()
        if not self._free(x, y):
            return
        st.grid[y, x] = CELL_INDEX[item]
        self._remove_item(item, 1)
        events.append({"event": "placed", "item": item, "cell": [x, y]})

    def _destroy(self, slot: int, events: List[dict]) -> None:
        names = self._slot_names()
        item = names[slot]
        if item == AIR:
            return
        count = self.state.inventory.pop(item)
        events.append({"event": "destroyed", "item": item, "count": count})

    def _add_item(self, item: str, n: int, events: List[dict], cell=None) -> None:
        inv = self.state.inventory
        if item not in inv and len(inv) >= self.slots:
            events.append({"event": "inventory_full", "item": item})
            return
        inv[item] = inv.get(item, 0) + n
        record = {"event": "obtained", "item": item, "count": n}
        if cell is not None:
            record["cell"] = list(cell)
        events.append(record)

    def _remove_item(self, item: str, n: int) -> None:
        inv = self.state.inventory
        inv[item] -= n
        if inv[item] <= 0:
            del inv[item]

    def _walk_mobs(self) -> None:
        st = self.state
        for mob in st.mobs:
            r = st.rng.random()
            d = int(st.rng.integers(4))
            if r >= self.mob_step_p:
                continue
            dx, dy = HEADINGS[d]
            nx, ny = mob.x + dx, mob.y + dy
            if (nx, ny) != st.agent_pos and self._free(nx, ny):
                mob.x, mob.y = nx, ny

    # --- observations ---
    def _slot_names(self) -> Tuple[str, ...]:
        names = [k for k, v in self.state.inventory.items() if v > 0]
        return tuple(names + [AIR] * (self.slots - len(names)))

    def inventory_slot(self, item: str) -> Optional[int]:
        names = self._slot_names()
        return names.index(item) if item in names else None

    def _ray_cells(self, px: int, py: int, dx: float, dy: float) -> Iterator[Tuple[int, int]]:
        """Cells a ray from the agent's cell centre enters, in order, while entry is within range.

        Crossing times are computed from the boundary index, not accumulated, so a ray through
        a cell corner steps diagonally and skips both side cells.
        """
        sx = 1 if dx > 0 else -1
        sy = 1 if dy > 0 else -1
        ax, ay = abs(dx), abs(dy)
        i = j = 0
        while True:
            tx = (i + 0.5) / ax if ax > 0 else INFINITY
            ty = (j + 0.5) / ay if ay > 0 else INFINITY
            if min(tx, ty) >= self.ray_range:
                return
            if tx <= ty:
                i += 1
            if ty <= tx:
                j += 1
            yield px + sx * i, py + sy * j

    def ray_cast(self, state: Optional[WorldState] = None) -> Tuple[RayHit, ...]:
        st = state or self.state
        h, w = st.grid.shape
        px, py = st.agent_pos
        air = CELL_INDEX[AIR]
        mobs = {(mob.x, mob.y): mob.kind for mob in st.mobs}
        hits = []
        for dx, dy in self.ray_directions[st.agent_yaw]:
            block_name, block_dist = AIR, INFINITY
            entity_name, entity_dist = NO_ENTITY, INFINITY
            for cx, cy in self._ray_cells(px, py, dx, dy):
                if not (0 <= cx < w and 0 <= cy < h):
                    break
                dist = math.sqrt((cx - px) ** 2 + (cy - py) ** 2)
                kind = int(st.grid[cy, cx])
                if kind != air:
                    block_name, block_dist = CELL_KINDS[kind], dist
                    break
                if entity_name == NO_ENTITY and (cx, cy) in mobs:
                    entity_name, entity_dist = mobs[(cx, cy)], dist
            hits.append(RayHit(block_name, block_dist, entity_name, entity_dist))
        return tuple(hits)

    def voxels(self, state: Optional[WorldState] = None) -> Tuple[Tuple[str, str, str], ...]:
        st = state or self.state
        x, y = st.agent_pos
        return tuple(tuple(st.cell(x + dx, y + dy) for dx in (-1, 0, 1)) for dy in (-1, 0, 1))

    def observe(self, state: Optional[WorldState] = None) -> Observation:
        st = state or self.state
        names = [k for k, v in st.inventory.items() if v > 0]
        return Observation(
            rays=self.ray_cast(st),
            voxels=self.voxels(st),
            inventory_names=tuple(names + [AIR] * (self.slots - len(names))),
            inventory=dict(st.inventory),
            pos=tuple(st.agent_pos),
            yaw=st.agent_yaw,
            tick=st.tick,
        )

    # --- debugging ---
    def snapshot_line(self) -> str:
        record = self.state.to_record()
        record["task_id"] = self.task.task_id if self.task else None
        return json.dumps(record, sort_keys=True)

    def export_snapshot(self, path) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(self.snapshot_line() + "\n")
