"""BlockWorld: N blocks plus the ground, a single move(x, y) action.

A block can be moved when nothing is on top of it, onto any free block or
onto the ground. Every action costs -0.1; reaching the goal configuration
ends the episode with an extra +10. States encode both the current and the
goal stacking as differently-typed edge pairs over N+1 nodes.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..graph import StateGraph, build_arrays
from ..policy import ActionSchema

STEP_REWARD = -0.1
SOLVE_REWARD = 10.0

# edge types: on/under for the current stacking, then for the goal
CUR_ON, CUR_UNDER, GOAL_ON, GOAL_UNDER = 0, 1, 2, 3


class IllegalMoveError(RuntimeError):
    pass


@dataclass(frozen=True)
class BWState:
    """`on[i]` is the support of block i; `n` itself denotes the ground."""

    n: int
    on: tuple[int, ...]
    goal: tuple[int, ...]

    @property
    def ground(self) -> int:
        return self.n


def free_blocks(n: int, on: tuple[int, ...]) -> np.ndarray:
    free = np.ones(n, dtype=bool)
    for support in on:
        if support < n:
            free[support] = False
    return free


def is_solved(state: BWState) -> bool:
    return state.on == state.goal


def _random_stacking(n: int, rng: np.random.Generator) -> tuple[int, ...]:
    on = [n] * n
    remaining = list(range(n))
    while remaining:
        k = int(rng.integers(1, len(remaining) + 1))
        picked = rng.choice(len(remaining), size=k, replace=False)
        tower = [remaining[i] for i in picked]
        on[tower[0]] = n
        for below, above in zip(tower, tower[1:]):
            on[above] = below
        for i in sorted(picked, reverse=True):
            remaining.pop(i)
    return tuple(on)


def generate(n: int, rng: np.random.Generator) -> BWState:
    """Start and goal are drawn independently; start == goal can happen and
    is resampled by the harness."""
    if n < 1:
        raise ValueError("need at least one block")
    return BWState(n, _random_stacking(n, rng), _random_stacking(n, rng))


def step(state: BWState, x: int, y: int) -> tuple[BWState, float, bool]:
    n = state.n
    free = free_blocks(n, state.on)
    if x == y or x >= n or not free[x] or (y < n and not free[y]) or y > n:
        raise IllegalMoveError(f"move({x},{y}) violates preconditions in {state.on}")
    on = list(state.on)
    on[x] = y
    nxt = BWState(n, tuple(on), state.goal)
    if is_solved(nxt):
        return nxt, STEP_REWARD + SOLVE_REWARD, True
    return nxt, STEP_REWARD, False


def precondition_masks(state: BWState, level: int, partial: tuple[int, ...]) -> np.ndarray:
    """Level 1: free blocks (never the ground). Level 2: free blocks plus the
    ground, minus the block being moved."""
    n = state.n
    free = free_blocks(n, state.on)
    mask = np.zeros(n + 1, dtype=bool)
    mask[:n] = free
    if level == 1:
        return mask
    if level == 2:
        mask[n] = True
        mask[partial[0]] = False
        return mask
    raise ValueError(f"move has no level {level}")


def encode(state: BWState) -> StateGraph:
    n = state.n
    feats = np.zeros((n + 1, 1))
    feats[n, 0] = 1.0
    blocks = np.arange(n, dtype=np.int64)
    cur = np.asarray(state.on, dtype=np.int64)
    goal = np.asarray(state.goal, dtype=np.int64)
    src = np.concatenate([blocks, cur, blocks, goal])
    dst = np.concatenate([cur, blocks, goal, blocks])
    types = np.repeat(np.int64([CUR_ON, CUR_UNDER, GOAL_ON, GOAL_UNDER]), n)
    return build_arrays(feats, src, dst, types, num_edge_types=4, validate=False)


def _neighbors(n: int, on: tuple[int, ...]):
    free = [x for x in range(n) if all(s != x for s in on)]
    free_set = set(free)
    for x in free:
        for y in free + [n]:
            if y == x or on[x] == y:
                continue
            if y < n and y not in free_set:
                continue
            nxt = list(on)
            nxt[x] = y
            yield tuple(nxt)


def optimal_steps(state: BWState, max_n: int = 8) -> int:
    """Exact shortest move count by bidirectional BFS over configurations."""
    if state.n > max_n:
        raise ValueError(f"optimal_steps supports n <= {max_n}")
    start, goal = state.on, state.goal
    if start == goal:
        return 0
    n = state.n
    dist_a = {start: 0}
    dist_b = {goal: 0}
    frontier_a, frontier_b = deque([start]), deque([goal])
    while frontier_a and frontier_b:
        if len(frontier_a) <= len(frontier_b):
            frontier, dist, other = frontier_a, dist_a, dist_b
        else:
            frontier, dist, other = frontier_b, dist_b, dist_a
        for _ in range(len(frontier)):
            cur = frontier.popleft()
            for nxt in _neighbors(n, cur):
                if nxt in dist:
                    continue
                dist[nxt] = dist[cur] + 1
                if nxt in other:
                    return dist[nxt] + other[nxt]
                frontier.append(nxt)
    raise RuntimeError("goal unreachable; generator produced an illegal pair")


def reachable_configurations(n: int) -> set[tuple[int, ...]]:
    start = tuple([n] * n)
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in _neighbors(n, cur):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def count_configurations(n: int) -> int:
    """Closed-form count of legal stackings of n distinct blocks."""
    if n < 1:
        raise ValueError("n must be positive")
    total = 0
    for i in range(1, n + 1):
        total += math.comb(n, i) * math.factorial(n - 1) // math.factorial(i - 1)
    return total


def save_instance(state: BWState) -> str:
    def line(rel: tuple[int, ...]) -> str:
        return " ".join(f"{x}:{'G' if s == state.n else s}" for x, s in enumerate(rel))

    return f"{state.n}\n{line(state.on)}\n{line(state.goal)}\n"


def load_instance(text: str) -> BWState:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    n = int(lines[0])

    def parse(ln: str) -> tuple[int, ...]:
        on = [n] * n
        for pair in ln.split():
            x, s = pair.split(":")
            on[int(x)] = n if s == "G" else int(s)
        return tuple(on)

    return BWState(n, parse(lines[1]), parse(lines[2]))


class BlockWorldEnv:
    """Adapter wiring BlockWorld into the encoder/policy/trainer stack."""

    node_feature_width = 1
    edge_feature_width = 0
    num_edge_types = 4
    global_context_width = 0
    name = "blockworld"
    supports_optimality = True

    def __init__(self, n: int):
        self.n = n

    def size_label(self) -> str:
        return str(self.n)

    def schemas(self) -> list[ActionSchema]:
        def precondition(state, level, chosen):
            if level == 0:
                return True  # a maximal block of some stack is always free
            return precondition_masks(state, level, chosen)

        return [ActionSchema(0, "move", "parametric", 2, precondition)]

    def generate(self, rng: np.random.Generator) -> BWState:
        return generate(self.n, rng)

    def is_solved(self, state: BWState) -> bool:
        return is_solved(state)

    def encode(self, state: BWState) -> StateGraph:
        return encode(state)

    def apply(self, state: BWState, choice, rng=None) -> tuple[BWState, float, bool]:
        x, y = choice.params
        return step(state, x, y)

    def max_entropy(self, state: BWState) -> float:
        f = int(free_blocks(state.n, state.on).sum())
        return 2.0 * math.log(f) if f > 1 else 0.0

    def optimal_steps(self, state: BWState) -> int:
        return optimal_steps(state)
