"""Sokoban on wall/goal/box/player matrices, driven by macro actions.

Macro actions target a grid node directly: move-to walks the player there
without disturbing boxes, push-<dir> walks behind a box and shoves it one
cell. An internal BFS planner expands macros into elementary moves; macro
reward is the sum over the executed elementary steps. Infeasible macros
degrade to a single no-op.

Level text format: '#' wall, '@' player, '$' box, '.' goal, '*' box on goal,
'+' player on goal, ' ' floor.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..graph import StateGraph, build_arrays
from ..policy import ActionSchema

STEP_REWARD = -0.1
ON_GOAL_REWARD = 1.0
OFF_GOAL_REWARD = -1.0
SOLVE_REWARD = 10.0

LEFT, RIGHT, UP, DOWN, NOOP = 0, 1, 2, 3, 4
DELTAS = {LEFT: (0, -1), RIGHT: (0, 1), UP: (-1, 0), DOWN: (1, 0)}

MACRO_MOVE_TO = "move_to"
MACRO_PUSH = {1: LEFT, 2: RIGHT, 3: UP, 4: DOWN}  # schema id -> push direction


class LevelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SokobanState:
    walls: np.ndarray   # (H, W) bool
    goals: np.ndarray   # (H, W) bool
    boxes: np.ndarray   # (H, W) bool
    player: tuple[int, int]

    def __post_init__(self):
        for arr in (self.walls, self.goals, self.boxes):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape


def validate(state: SokobanState) -> None:
    w, g, b = state.walls, state.goals, state.boxes
    r, c = state.player
    if w.shape != g.shape or w.shape != b.shape:
        raise LevelFormatError("matrix shapes differ")
    if (b & w).any() or w[r, c] or b[r, c]:
        raise LevelFormatError("player or box inside a wall/box")
    if int(b.sum()) != int(g.sum()):
        raise LevelFormatError(f"{int(b.sum())} boxes vs {int(g.sum())} goals")


def is_solved(state: SokobanState) -> bool:
    return bool((state.boxes == state.goals).all())


def _wall_at(walls: np.ndarray, r: int, c: int) -> bool:
    # off-grid counts as wall so border-less hand-made levels stay sane
    if r < 0 or c < 0 or r >= walls.shape[0] or c >= walls.shape[1]:
        return True
    return bool(walls[r, c])


def elementary_step(state: SokobanState, action: int) -> tuple[SokobanState, float, bool]:
    """Standard mechanics; blocked moves and no-op cost the step penalty."""
    if action == NOOP:
        return state, STEP_REWARD, False
    dr, dc = DELTAS[action]
    r, c = state.player
    tr, tc = r + dr, c + dc
    if _wall_at(state.walls, tr, tc):
        return state, STEP_REWARD, False
    if state.boxes[tr, tc]:
        br, bc = tr + dr, tc + dc
        if _wall_at(state.walls, br, bc) or (0 <= br < state.shape[0] and 0 <= bc < state.shape[1] and state.boxes[br, bc]):
            return state, STEP_REWARD, False
        boxes = state.boxes.copy()
        boxes[tr, tc] = False
        boxes[br, bc] = True
        reward = STEP_REWARD
        if state.goals[br, bc]:
            reward += ON_GOAL_REWARD
        if state.goals[tr, tc]:
            reward += OFF_GOAL_REWARD
        nxt = SokobanState(state.walls, state.goals, boxes, (tr, tc))
        if is_solved(nxt):
            return nxt, reward + SOLVE_REWARD, True
        return nxt, reward, False
    return SokobanState(state.walls, state.goals, state.boxes, (tr, tc)), STEP_REWARD, False


def plan_move_to(state: SokobanState, cell: tuple[int, int]) -> list[int] | None:
    """Shortest walk to ``cell`` treating boxes as obstacles; None if unreachable."""
    if state.walls[cell] or state.boxes[cell]:
        return None
    if cell == state.player:
        return []
    blocked = state.walls | state.boxes
    h, w = state.shape
    prev: dict[tuple[int, int], tuple[tuple[int, int], int]] = {}
    queue = deque([state.player])
    seen = {state.player}
    while queue:
        cur = queue.popleft()
        for action, (dr, dc) in DELTAS.items():
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt in seen or not (0 <= nxt[0] < h and 0 <= nxt[1] < w) or blocked[nxt]:
                continue
            seen.add(nxt)
            prev[nxt] = (cur, action)
            if nxt == cell:
                path = []
                node = cell
                while node != state.player:
                    node, action = prev[node]
                    path.append(action)
                path.reverse()
                return path
            queue.append(nxt)
    return None


def macro_plan(state: SokobanState, schema_id: int, cell: tuple[int, int]) -> list[int]:
    """Elementary expansion of a macro; a single no-op when infeasible."""
    if schema_id == 0:
        plan = plan_move_to(state, cell)
        return [NOOP] if plan is None else plan
    direction = MACRO_PUSH[schema_id]
    dr, dc = DELTAS[direction]
    if not state.boxes[cell]:
        return [NOOP]
    ahead = (cell[0] + dr, cell[1] + dc)
    behind = (cell[0] - dr, cell[1] - dc)
    h, w = state.shape
    if _wall_at(state.walls, *ahead) or state.boxes[ahead] or not (0 <= behind[0] < h and 0 <= behind[1] < w):
        return [NOOP]
    walk = plan_move_to(state, behind)
    if walk is None:
        return [NOOP]
    return walk + [direction]


def macro_step(state: SokobanState, schema_id: int,
               cell: tuple[int, int]) -> tuple[SokobanState, float, bool, list[int]]:
    """Execute a macro; returns the elementary actions it expanded to."""
    actions = macro_plan(state, schema_id, cell)
    total = 0.0
    solved = False
    for action in actions:
        state, reward, solved = elementary_step(state, action)
        total += reward
        if solved:
            break
    return state, total, solved, actions


def encode(state: SokobanState) -> StateGraph:
    """One node per non-wall cell with (goal, box, player) bits; neighbours
    are linked both ways, the edge type naming the travel direction."""
    h, w = state.shape
    rows, cols = np.nonzero(~state.walls)
    k = len(rows)
    index = np.full((h + 2, w + 2), -1, dtype=np.int64)  # -1 border absorbs off-grid
    index[rows + 1, cols + 1] = np.arange(k)
    feats = np.empty((k, 3))
    feats[:, 0] = state.goals[rows, cols]
    feats[:, 1] = state.boxes[rows, cols]
    feats[:, 2] = 0.0
    feats[index[state.player[0] + 1, state.player[1] + 1], 2] = 1.0
    src_parts, dst_parts, type_parts = [], [], []
    for direction, (dr, dc) in DELTAS.items():
        neighbor = index[rows + 1 + dr, cols + 1 + dc]
        valid = neighbor >= 0
        src_parts.append(np.flatnonzero(valid))
        dst_parts.append(neighbor[valid])
        type_parts.append(np.full(int(valid.sum()), direction, dtype=np.int64))
    return build_arrays(feats, np.concatenate(src_parts), np.concatenate(dst_parts),
                        np.concatenate(type_parts), num_edge_types=4, validate=False)


def walkable_cells(state: SokobanState) -> list[tuple[int, int]]:
    return [tuple(rc) for rc in np.argwhere(~state.walls)]


_CHARS = {"#": "wall", "@": "player", "$": "box", ".": "goal", "*": "box+goal",
          "+": "player+goal", " ": "floor"}


def load_level(text: str) -> SokobanState:
    rows = [line for line in text.splitlines() if line.strip("\r")]
    if not rows:
        raise LevelFormatError("empty level")
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise LevelFormatError("level is not rectangular")
    h = len(rows)
    walls = np.zeros((h, width), dtype=bool)
    goals = np.zeros((h, width), dtype=bool)
    boxes = np.zeros((h, width), dtype=bool)
    player = None
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch not in _CHARS:
                raise LevelFormatError(f"unknown cell {ch!r} at {(r, c)}")
            if ch == "#":
                walls[r, c] = True
            if ch in ".*+":
                goals[r, c] = True
            if ch in "$*":
                boxes[r, c] = True
            if ch in "@+":
                if player is not None:
                    raise LevelFormatError("more than one player")
                player = (r, c)
    if player is None:
        raise LevelFormatError("no player")
    state = SokobanState(walls, goals, boxes, player)
    validate(state)
    return state


def load_level_file(text: str) -> list[SokobanState]:
    """Parse a multi-level text file; ';'-prefixed lines separate levels."""
    levels = []
    chunk: list[str] = []
    for line in text.splitlines():
        if line.startswith(";"):
            if chunk:
                levels.append(load_level("\n".join(chunk)))
                chunk = []
        elif line.strip("\r"):
            chunk.append(line)
    if chunk:
        levels.append(load_level("\n".join(chunk)))
    return levels


def save_level(state: SokobanState) -> str:
    h, w = state.shape
    out = []
    for r in range(h):
        row = []
        for c in range(w):
            box, goal = state.boxes[r, c], state.goals[r, c]
            if state.walls[r, c]:
                row.append("#")
            elif (r, c) == state.player:
                row.append("+" if goal else "@")
            elif box and goal:
                row.append("*")
            elif box:
                row.append("$")
            elif goal:
                row.append(".")
            else:
                row.append(" ")
        out.append("".join(row))
    return "\n".join(out) + "\n"


def generate_level(width: int, height: int, num_boxes: int, rng: np.random.Generator,
                   wall_density: float = 0.15, min_pulls: int = 5,
                   max_tries: int = 200) -> SokobanState:
    """Reverse-play generation: boxes start on their goals and the player
    pulls them around for a budgeted random walk, so the emitted start is
    solvable by construction."""
    if width < 4 or height < 4:
        raise ValueError("grid too small")
    for _ in range(max_tries):
        state = _try_generate(width, height, num_boxes, rng, wall_density, min_pulls)
        if state is not None:
            return state
    raise RuntimeError("level generation budget exhausted")


def _try_generate(width, height, num_boxes, rng, wall_density, min_pulls):
    walls = np.zeros((height, width), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    interior = rng.random((height - 2, width - 2)) < wall_density
    walls[1:-1, 1:-1] = interior

    floor = [tuple(rc) for rc in np.argwhere(~walls)]
    if len(floor) < num_boxes + 2:
        return None
    component = _flood(walls, floor[0])
    if len(component) < max(len(floor) * 3 // 4, num_boxes + 2):
        return None
    for cell in floor:
        if cell not in component:
            walls[cell] = True
    floor = sorted(component)

    picks = rng.choice(len(floor), size=num_boxes + 1, replace=False)
    goals = np.zeros_like(walls)
    boxes = np.zeros_like(walls)
    for i in picks[:num_boxes]:
        goals[floor[i]] = True
        boxes[floor[i]] = True
    player = floor[picks[num_boxes]]

    budget = int(rng.integers(height * width // 2, height * width * 2 + 1))
    pulls = 0
    for _ in range(budget):
        pull_opts, move_opts = [], []
        for dr, dc in DELTAS.values():
            dest = (player[0] + dr, player[1] + dc)
            if walls[dest] or boxes[dest]:
                continue
            move_opts.append(dest)
            src = (player[0] - dr, player[1] - dc)
            if boxes[src]:
                pull_opts.append((dest, src))
        if pull_opts and (not move_opts or rng.random() < 0.5):
            dest, src = pull_opts[int(rng.integers(len(pull_opts)))]
            boxes[src] = False
            boxes[player] = True
            player = dest
            pulls += 1
        elif move_opts:
            player = move_opts[int(rng.integers(len(move_opts)))]
        else:
            break  # boxed into a pocket; let the outer retry handle it
    if pulls < min_pulls or (boxes == goals).all():
        return None
    state = SokobanState(walls, goals, boxes, player)
    validate(state)
    return state


def _flood(walls: np.ndarray, start: tuple[int, int]) -> set[tuple[int, int]]:
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in DELTAS.values():
            nxt = (r + dr, c + dc)
            if nxt not in seen and not walls[nxt]:
                seen.add(nxt)
                queue.append(nxt)
    return seen


class SokobanEnv:
    """Adapter for the trainer; draws levels from a pool or the generator."""

    node_feature_width = 3
    edge_feature_width = 0
    num_edge_types = 4
    global_context_width = 0
    name = "sokoban"
    supports_optimality = False

    def __init__(self, width: int, height: int, num_boxes: int,
                 levels: list[SokobanState] | None = None):
        self.width = width
        self.height = height
        self.num_boxes = num_boxes
        self.levels = levels

    def size_label(self) -> str:
        return f"{self.width}x{self.height}/{self.num_boxes}"

    def schemas(self) -> list[ActionSchema]:
        return [
            ActionSchema(0, MACRO_MOVE_TO, "parametric", 1),
            ActionSchema(1, "push_left", "parametric", 1),
            ActionSchema(2, "push_right", "parametric", 1),
            ActionSchema(3, "push_up", "parametric", 1),
            ActionSchema(4, "push_down", "parametric", 1),
        ]

    def generate(self, rng: np.random.Generator) -> SokobanState:
        if self.levels is not None:
            return self.levels[int(rng.integers(0, len(self.levels)))]
        return generate_level(self.width, self.height, self.num_boxes, rng)

    def is_solved(self, state: SokobanState) -> bool:
        return is_solved(state)

    def encode(self, state: SokobanState) -> StateGraph:
        return encode(state)

    def apply(self, state: SokobanState, choice, rng=None) -> tuple[SokobanState, float, bool]:
        cell = walkable_cells(state)[choice.params[0]]
        nxt, reward, solved, _ = macro_step(state, choice.schema_id, cell)
        return nxt, reward, solved

    def max_entropy(self, state: SokobanState) -> float:
        n = int((~state.walls).sum())
        return float(np.log(5 * n))
