"""Deterministic 2-D tabletop simulator with a scripted expert.

The world is a P x P cell grid rendered to a single color-index image:
0 empty, 1 open gripper, 2 closed gripper, 3 drawer slab, 4..7 objects.
The gripper is drawn last and a held object is never drawn (it sits inside
the jaws), which keeps rendering invertible for expert-reachable states:
:func:`world_from_image` recovers the world from one image plus the task.

The drawer is a 3-row slab against the left wall spanning columns 0..E,
E = round(open_fraction * 4). Its handle is the middle cell of the front
column; a closed gripper on the handle drags the drawer by +-0.25 per
sideways move.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .data_model import ContinuousAction, Episode, Observation, ReasoningTrace, Step

COLOR_EMPTY = 0
COLOR_GRIPPER_OPEN = 1
COLOR_GRIPPER_CLOSED = 2
COLOR_DRAWER = 3
OBJECT_COLORS: Mapping[str, int] = {"can": 4, "orange": 5, "spoon": 6, "block": 7}
COLOR_TO_NAME = {c: n for n, c in OBJECT_COLORS.items()}
NUM_COLORS = 8

FAMILIES = ("move_near", "put_on", "open_drawer", "close_drawer", "pick")
NEAR_RADIUS = 2
PUT_RADIUS = 1
DRAWER_STEPS = 4          # quarter-turns from closed to fully open
MIN_GRID = 10
SPAWN_X_MIN = DRAWER_STEPS + 3  # clear of the fully open drawer plus margin

MOVE = 1.0
HOLD = ContinuousAction((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)


class SimError(ValueError):
    """Raised for invalid tasks, worlds, or unsolvable expert states."""


class ReconstructionError(SimError):
    """Raised when an image cannot be mapped back to a world state."""


@dataclass(frozen=True, slots=True)
class SimObject:
    name: str
    color: int
    x: int
    y: int
    held: bool = False


@dataclass(frozen=True, slots=True)
class Gripper:
    x: int
    y: int
    open: bool = True


@dataclass(frozen=True, slots=True)
class Drawer:
    row_lo: int
    row_hi: int
    open_fraction: float = 0.0


@dataclass(frozen=True, slots=True)
class WorldState:
    grid_size: int
    objects: tuple[SimObject, ...]
    gripper: Gripper
    drawer: Drawer
    seed: int = 0

    def object_named(self, name: str) -> SimObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise SimError(f"task references object '{name}' absent from world")

    def object_at(self, x: int, y: int) -> SimObject | None:
        for obj in self.objects:
            if not obj.held and obj.x == x and obj.y == y:
                return obj
        return None

    def held_object(self) -> SimObject | None:
        for obj in self.objects:
            if obj.held:
                return obj
        return None


@dataclass(frozen=True, slots=True)
class TaskSpec:
    family: str
    source: str | None
    target: str | None
    instruction: str
    near_radius: int = NEAR_RADIUS

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise SimError(f"unknown task family '{self.family}'")


@dataclass(frozen=True, slots=True)
class RolloutResult:
    success: bool
    steps_taken: int
    grasped: bool
    error: str | None
    trajectory: tuple[tuple[str, ContinuousAction], ...]


@dataclass(frozen=True)
class RolloutStats:
    results: tuple[RolloutResult, ...]

    @property
    def n_episodes(self) -> int:
        return len(self.results)

    @property
    def success_rate(self) -> float:
        return sum(r.success for r in self.results) / self.n_episodes

    @property
    def grasp_rate(self) -> float:
        return sum(r.grasped for r in self.results) / self.n_episodes

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "success_rate": self.success_rate,
            "grasp_rate": self.grasp_rate,
            "failures": sum(1 for r in self.results if r.error is not None),
        }


def manhattan(ax: int, ay: int, bx: int, by: int) -> int:
    return abs(ax - bx) + abs(ay - by)


def drawer_extent(fraction: float) -> int:
    return int(round(fraction * DRAWER_STEPS))


def handle_cell(state: WorldState) -> tuple[int, int]:
    mid = (state.drawer.row_lo + state.drawer.row_hi) // 2
    return drawer_extent(state.drawer.open_fraction), mid


def instruction_for(family: str, source: str | None, target: str | None) -> str:
    if family == "move_near":
        return f"move the {source} near the {target}"
    if family == "put_on":
        return f"put the {source} on the {target}"
    if family == "pick":
        return f"pick up the {source}"
    if family == "open_drawer":
        return "open the drawer"
    if family == "close_drawer":
        return "close the drawer"
    raise SimError(f"unknown task family '{family}'")


def task_from_instruction(instruction: str) -> TaskSpec:
    """Invert the instruction templates back to a TaskSpec."""
    import re

    text = instruction.strip().lower()
    m = re.fullmatch(r"move the (\w+) near the (\w+)", text)
    if m:
        return TaskSpec("move_near", m.group(1), m.group(2), text)
    m = re.fullmatch(r"put the (\w+) on the (\w+)", text)
    if m:
        return TaskSpec("put_on", m.group(1), m.group(2), text, near_radius=PUT_RADIUS)
    m = re.fullmatch(r"pick up the (\w+)", text)
    if m:
        return TaskSpec("pick", m.group(1), None, text)
    if text == "open the drawer":
        return TaskSpec("open_drawer", None, None, text)
    if text == "close the drawer":
        return TaskSpec("close_drawer", None, None, text)
    raise SimError(f"unrecognized instruction: {instruction!r}")


def reset(task_family: str, seed: int, grid_size: int = 16) -> tuple[WorldState, TaskSpec]:
    """Deterministically sample a solvable, non-trivial start state."""
    if task_family not in FAMILIES:
        raise SimError(f"unknown task family '{task_family}'")
    if grid_size < MIN_GRID:
        raise SimError(f"grid_size must be >= {MIN_GRID}, got {grid_size}")
    rng = random.Random(seed)
    mid = grid_size // 2
    drawer = Drawer(row_lo=mid - 1, row_hi=mid + 1,
                    open_fraction=1.0 if task_family == "close_drawer" else 0.0)

    names = sorted(OBJECT_COLORS)
    if task_family in ("move_near", "put_on"):
        n_objects = rng.choice((2, 3))
    elif task_family == "pick":
        n_objects = rng.choice((1, 2))
    else:
        n_objects = rng.choice((1, 2))
    chosen = rng.sample(names, n_objects)
    source = chosen[0] if task_family in ("move_near", "put_on", "pick") else None
    target = chosen[1] if task_family in ("move_near", "put_on") else None

    zone = [(x, y) for x in range(SPAWN_X_MIN, grid_size - 1) for y in range(1, grid_size - 1)]
    radius = PUT_RADIUS if task_family == "put_on" else NEAR_RADIUS
    for _ in range(1000):
        cells = rng.sample(zone, n_objects + 1)
        gx, gy = cells[-1]
        pos = dict(zip(chosen, cells[:-1]))
        if task_family in ("move_near", "put_on"):
            sx, sy = pos[source]
            tx, ty = pos[target]
            if manhattan(sx, sy, tx, ty) <= radius:
                continue
        if task_family == "pick" and (gx, gy) == pos[source]:
            continue
        break
    else:  # pragma: no cover - the zone is far larger than the constraints
        raise SimError(f"could not place a valid '{task_family}' scene for seed {seed}")

    objects = tuple(
        SimObject(name=name, color=OBJECT_COLORS[name], x=x, y=y) for name, (x, y) in pos.items()
    )
    world = WorldState(grid_size=grid_size, objects=objects,
                       gripper=Gripper(gx, gy, open=True), drawer=drawer, seed=seed)
    task = TaskSpec(task_family, source, target,
                    instruction_for(task_family, source, target), near_radius=radius)
    return world, task


def render(state: WorldState) -> np.ndarray:
    """Rasterize to a (P, P) int grid; see module docstring for the palette."""
    img = np.zeros((state.grid_size, state.grid_size), dtype=np.int64)
    ext = drawer_extent(state.drawer.open_fraction)
    img[state.drawer.row_lo : state.drawer.row_hi + 1, 0 : ext + 1] = COLOR_DRAWER
    for obj in state.objects:
        if not obj.held:
            img[obj.y, obj.x] = obj.color
    g = state.gripper
    img[g.y, g.x] = COLOR_GRIPPER_OPEN if g.open else COLOR_GRIPPER_CLOSED
    return img


def observe(state: WorldState, task: TaskSpec) -> Observation:
    return Observation(images=(render(state),), instruction=task.instruction)


def _quant(v: float) -> int:
    if v >= 0.5:
        return 1
    if v <= -0.5:
        return -1
    return 0


def step(state: WorldState, action: ContinuousAction) -> WorldState:
    """Advance one tick. Pure: returns a new WorldState.

    Gripper command first, then movement. Rotation and the z translation
    are recorded in the data but have no effect on this tabletop.
    """
    p = state.grid_size
    objects = list(state.objects)
    grip = state.gripper

    g = action.gripper
    if g < -0.5 and grip.open:
        grip = replace(grip, open=False)
        if state.held_object() is None:
            for i, obj in enumerate(objects):
                if not obj.held and obj.x == grip.x and obj.y == grip.y:
                    objects[i] = replace(obj, held=True)
                    break
    elif g > 0.5 and not grip.open:
        held_idx = next((i for i, o in enumerate(objects) if o.held), None)
        if held_idx is None:
            grip = replace(grip, open=True)
        else:
            blocked = any(
                not o.held and o.x == grip.x and o.y == grip.y for o in objects
            )
            if not blocked:  # release only onto a free cell
                objects[held_idx] = replace(objects[held_idx], held=False)
                grip = replace(grip, open=True)

    dx, dy = _quant(action.translation[0]), _quant(action.translation[1])
    mid_state = replace(state, objects=tuple(objects), gripper=grip)
    anchored = (
        not grip.open
        and mid_state.held_object() is None
        and (grip.x, grip.y) == handle_cell(mid_state)
    )
    drawer = state.drawer
    if anchored:
        if dx != 0:
            new_frac = min(1.0, max(0.0, drawer.open_fraction + dx / DRAWER_STEPS))
            if new_frac != drawer.open_fraction:
                drawer = replace(drawer, open_fraction=new_frac)
                grip = replace(grip, x=grip.x + dx)
    elif dx != 0 or dy != 0:
        nx = min(p - 1, max(0, grip.x + dx))
        ny = min(p - 1, max(0, grip.y + dy))
        grip = replace(grip, x=nx, y=ny)
        for i, obj in enumerate(objects):
            if obj.held:
                objects[i] = replace(obj, x=nx, y=ny)

    return WorldState(grid_size=p, objects=tuple(objects), gripper=grip,
                      drawer=drawer, seed=state.seed)


def success(state: WorldState, task: TaskSpec) -> bool:
    if task.family == "open_drawer":
        return state.drawer.open_fraction >= 0.999
    if task.family == "close_drawer":
        return state.drawer.open_fraction <= 0.001
    src = state.object_named(task.source)
    if task.family == "pick":
        return src.held
    tgt = state.object_named(task.target)
    return (not src.held) and manhattan(src.x, src.y, tgt.x, tgt.y) <= task.near_radius


def _move(dx: int, dy: int) -> ContinuousAction:
    return ContinuousAction((float(dx) * MOVE, float(dy) * MOVE, 0.0), (0.0, 0.0, 0.0), 0.0)


def _grip(v: float) -> ContinuousAction:
    return ContinuousAction((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), v)


def _greedy_step(
    fx: int, fy: int, tx: int, ty: int, avoid: set[tuple[int, int]], grid: int
) -> tuple[int, int]:
    """One axis-aligned step from (fx, fy) toward (tx, ty), dodging cells in
    ``avoid`` with a deterministic sidestep."""
    def ok(ox: int, oy: int) -> bool:
        nx, ny = fx + ox, fy + oy
        return 0 <= nx < grid and 0 <= ny < grid and (nx, ny) not in avoid

    dx, dy = tx - fx, ty - fy
    options: list[tuple[int, int]] = []
    if dx != 0:
        options.append((1 if dx > 0 else -1, 0))
    if dy != 0:
        options.append((0, 1 if dy > 0 else -1))
    if len(options) == 2 and abs(dy) > abs(dx):
        options.reverse()
    for ox, oy in options:
        if ok(ox, oy):
            return ox, oy
    for ox, oy in ((1, 0), (-1, 0), (0, 1), (0, -1)):  # deterministic sidestep
        if ok(ox, oy):
            return ox, oy
    raise SimError("gripper is fully enclosed; cannot happen on this tabletop")


def scripted_expert(state: WorldState, task: TaskSpec) -> ContinuousAction:
    """Greedy Manhattan-path policy. Emits a hold action once the task's
    success predicate is satisfied."""
    if success(state, task):
        return HOLD
    gx, gy = state.gripper.x, state.gripper.y

    if task.family in ("open_drawer", "close_drawer"):
        hx, hy = handle_cell(state)
        opening = task.family == "open_drawer"
        if (gx, gy) == (hx, hy):
            if state.gripper.open:
                return _grip(-MOVE)
            if state.held_object() is not None:  # pragma: no cover - defensive
                return _grip(MOVE)
            return _move(1 if opening else -1, 0)
        if not state.gripper.open:
            return _grip(MOVE)
        ox, oy = _greedy_step(gx, gy, hx, hy, avoid=set(), grid=state.grid_size)
        return _move(ox, oy)

    src = state.object_named(task.source)
    if not src.held:
        if (gx, gy) == (src.x, src.y):
            if state.gripper.open:
                return _grip(-MOVE)
            return _grip(MOVE)  # pragma: no cover - closed-empty, reopen first
        if not state.gripper.open:
            return _grip(MOVE)
        ox, oy = _greedy_step(gx, gy, src.x, src.y, avoid=set(), grid=state.grid_size)
        return _move(ox, oy)

    if task.family == "pick":  # pragma: no cover - held means success already
        return HOLD

    tgt = state.object_named(task.target)
    d = manhattan(gx, gy, tgt.x, tgt.y)
    if d <= task.near_radius:
        if state.object_at(gx, gy) is None:
            return _grip(MOVE)  # release here
        # release cell occupied: shift one cell while staying inside the radius
        for ox, oy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = gx + ox, gy + oy
            if not (0 <= nx < state.grid_size and 0 <= ny < state.grid_size):
                continue
            if state.object_at(nx, ny) is None and manhattan(nx, ny, tgt.x, tgt.y) <= task.near_radius:
                return _move(ox, oy)
    blockers = {(o.x, o.y) for o in state.objects if not o.held}
    ox, oy = _greedy_step(gx, gy, tgt.x, tgt.y, avoid=blockers, grid=state.grid_size)
    return _move(ox, oy)


def plan_steps(state: WorldState, task: TaskSpec) -> list[str]:
    """The expert's remaining plan as short imperative phrases."""
    if success(state, task):
        return ["Task complete"]
    if task.family in ("open_drawer", "close_drawer"):
        verb = "pull" if task.family == "open_drawer" else "push"
        hx, hy = handle_cell(state)
        steps = []
        at_handle = (state.gripper.x, state.gripper.y) == (hx, hy)
        if not at_handle:
            steps.append("approach handle")
        if state.gripper.open or not at_handle:
            steps.append("grasp handle")
        steps.append(f"{verb} handle")
        return steps
    src = state.object_named(task.source)
    steps = []
    if not src.held:
        if (state.gripper.x, state.gripper.y) != (src.x, src.y):
            steps.append(f"move to the {task.source}")
        steps.append(f"grasp the {task.source}")
    if task.family == "pick":
        return steps
    d_from = (state.gripper.x, state.gripper.y) if src.held else (src.x, src.y)
    tgt = state.object_named(task.target)
    if manhattan(d_from[0], d_from[1], tgt.x, tgt.y) > task.near_radius:
        steps.append(f"carry the {task.source} to the {task.target}")
    steps.append(f"release the {task.source}")
    return steps


def _drawer_word(fraction: float) -> str:
    if fraction <= 0.001:
        return "closed"
    if fraction >= 0.999:
        return "open"
    return "partly open"


def ground_truth_trace(state: WorldState, task: TaskSpec) -> ReasoningTrace:
    """Templated step-wise reasoning computed from privileged state."""
    if task.source is not None:
        state.object_named(task.source)  # raises if the task is inconsistent
    if task.target is not None:
        state.object_named(task.target)

    phrases = []
    for obj in sorted(state.objects, key=lambda o: o.color):  # order-independent text
        if obj.held:
            phrases.append(f"the {obj.name} held by the gripper")
        else:
            phrases.append(f"a {obj.name} at row {obj.y} column {obj.x}")
    g = state.gripper
    obs_text = (
        "i see " + " , ".join(phrases)
        + f" . the gripper is {'open' if g.open else 'closed'} at row {g.y} column {g.x}"
        + f" . the drawer is {_drawer_word(state.drawer.open_fraction)} ."
    )
    situation = (
        f"there are {len(state.objects)} objects on the table . "
        f"the task is to {task.instruction} ."
    )

    if task.family in ("open_drawer", "close_drawer"):
        hx, hy = handle_cell(state)
        spatial = f"the drawer front is at column {hx} and the handle is at row {hy} column {hx} ."
    elif task.family == "pick":
        src = state.object_named(task.source)
        spatial = (
            f"the {task.source} is {abs(src.x - g.x)} columns and "
            f"{abs(src.y - g.y)} rows from the gripper ."
        )
    else:
        src = state.object_named(task.source)
        tgt = state.object_named(task.target)
        spatial = (
            f"the {task.source} is {abs(src.x - tgt.x)} columns and "
            f"{abs(src.y - tgt.y)} rows from the {task.target} . "
            f"the gripper is {manhattan(g.x, g.y, src.x, src.y)} cells from the {task.source} ."
        )

    steps = plan_steps(state, task)
    sub_action = "hold position" if steps == ["Task complete"] else steps[0]
    return ReasoningTrace(
        observation=obs_text,
        situation_analysis=situation,
        spatial_reasoning=spatial,
        task_planning="",
        logical_steps=tuple(steps),
        sub_action=sub_action,
    )


def world_from_image(image: np.ndarray, task: TaskSpec) -> WorldState:
    """Invert :func:`render`. Needs the task to name objects hidden under the
    gripper (a held source, or an object the gripper hovers over)."""
    img = np.asarray(image, dtype=np.int64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ReconstructionError(f"image must be a square grid, got shape {img.shape}")
    p = int(img.shape[0])
    if p < MIN_GRID:
        raise ReconstructionError(f"image side {p} below minimum grid {MIN_GRID}")
    if img.min() < 0 or img.max() >= NUM_COLORS:
        raise ReconstructionError("image holds color indices outside the palette")

    grip_cells = np.argwhere((img == COLOR_GRIPPER_OPEN) | (img == COLOR_GRIPPER_CLOSED))
    if grip_cells.shape[0] != 1:
        raise ReconstructionError(f"expected exactly one gripper marker, found {grip_cells.shape[0]}")
    gy, gx = (int(v) for v in grip_cells[0])
    gripper = Gripper(x=gx, y=gy, open=bool(img[gy, gx] == COLOR_GRIPPER_OPEN))

    drawer_cells = np.argwhere(img == COLOR_DRAWER)
    if drawer_cells.shape[0] == 0:
        raise ReconstructionError("no drawer slab visible")
    ext = int(drawer_cells[:, 1].max())
    mid = p // 2
    drawer = Drawer(row_lo=mid - 1, row_hi=mid + 1, open_fraction=ext / DRAWER_STEPS)

    objects: list[SimObject] = []
    seen: set[str] = set()
    for color, name in COLOR_TO_NAME.items():
        cells = np.argwhere(img == color)
        if cells.shape[0] > 1:
            raise ReconstructionError(f"object color {color} appears {cells.shape[0]} times")
        if cells.shape[0] == 1:
            y, x = (int(v) for v in cells[0])
            objects.append(SimObject(name=name, color=color, x=x, y=y))
            seen.add(name)
    for name in (task.source, task.target):
        if name is not None and name not in seen:
            # hidden under the gripper: held when the jaws are closed
            objects.append(SimObject(name=name, color=OBJECT_COLORS[name], x=gx, y=gy,
                                     held=not gripper.open and name == task.source))
            seen.add(name)
    objects.sort(key=lambda o: o.color)
    return WorldState(grid_size=p, objects=tuple(objects), gripper=gripper, drawer=drawer)


def trim_trailing_holds(steps: list[Step], tol: float = 1e-9) -> list[Step]:
    out = list(steps)
    while out and max(abs(v) for v in out[-1].action.as_vector()) <= tol:
        out.pop()
    return out


def generate_demonstrations(
    n_episodes: int,
    families: Iterable[str] = ("move_near", "pick"),
    seed: int = 0,
    grid_size: int = 16,
    max_steps: int = 40,
) -> list[Episode]:
    """Roll the scripted expert and package successful episodes."""
    families = tuple(families)
    if not families or any(f not in FAMILIES for f in families):
        raise SimError(f"families must be a non-empty subset of {FAMILIES}, got {families}")
    episodes: list[Episode] = []
    for i in range(n_episodes):
        family = families[i % len(families)]
        ep_seed = seed * 1_000_003 + i
        world, task = reset(family, ep_seed, grid_size=grid_size)
        steps: list[Step] = []
        for _ in range(max_steps):
            if success(world, task):
                break
            action = scripted_expert(world, task)
            steps.append(Step(observation=observe(world, task), action=action))
            world = step(world, action)
        if not success(world, task):  # pragma: no cover - expert must solve
            raise SimError(f"expert failed to solve {family} seed {ep_seed} in {max_steps} steps")
        steps = trim_trailing_holds(steps)
        episodes.append(
            Episode(
                episode_id=f"{family}-{i:05d}",
                task_name=family,
                steps=tuple(steps),
                metadata={"seed": str(ep_seed), "family": family, "source": "scripted_expert"},
            )
        )
    return episodes


def episode_stats(episodes: Iterable[Episode]) -> dict:
    lengths = []
    families: dict[str, int] = {}
    for ep in episodes:
        lengths.append(len(ep.steps))
        families[ep.task_name] = families.get(ep.task_name, 0) + 1
    return {
        "episodes": len(lengths),
        "steps_total": int(sum(lengths)),
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
        "min_length": int(min(lengths)) if lengths else 0,
        "max_length": int(max(lengths)) if lengths else 0,
        "families": dict(sorted(families.items())),
    }


def digest(state: WorldState) -> str:
    g = state.gripper
    parts = [f"g:{g.x},{g.y},{'o' if g.open else 'c'}", f"d:{state.drawer.open_fraction:.2f}"]
    for obj in state.objects:
        parts.append(f"{obj.name}:{obj.x},{obj.y}{',h' if obj.held else ''}")
    return ";".join(parts)


def rollout(
    policy: Callable[[Observation], ContinuousAction],
    task_family: str,
    n_episodes: int,
    seed: int = 0,
    max_steps: int = 40,
    grid_size: int = 16,
) -> RolloutStats:
    """Closed-loop evaluation with per-episode RNG streams derived from
    (seed, episode index). A policy exception fails that episode only."""
    results: list[RolloutResult] = []
    for i in range(n_episodes):
        world, task = reset(task_family, seed * 1_000_003 + i, grid_size=grid_size)
        grasped = False
        error: str | None = None
        trajectory: list[tuple[str, ContinuousAction]] = []
        for _ in range(max_steps):
            if success(world, task):
                break
            try:
                action = policy(observe(world, task))
            except Exception as exc:  # noqa: BLE001 - any policy fault fails the episode
                error = f"{type(exc).__name__}: {exc}"
                break
            trajectory.append((digest(world), action))
            world = step(world, action)
            grasped = grasped or world.held_object() is not None
        results.append(
            RolloutResult(
                success=error is None and success(world, task),
                steps_taken=len(trajectory),
                grasped=grasped,
                error=error,
                trajectory=tuple(trajectory),
            )
        )
    return RolloutStats(results=tuple(results))
