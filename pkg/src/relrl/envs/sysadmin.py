"""SysAdmin: keep a dependency network of computers running.

Online machines stay up with probability 0.9 * (1 + online deps) / (1 + deps);
offline ones come back spontaneously with probability 0.04. Resetting forces a
machine on for the next step. Reward per step is the number of online
machines minus 0.75 per reset. Single-reset (-S) and subset-reset (-M)
variants differ only in their action schemas. Episodes never terminate; the
harness truncates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..graph import StateGraph, build_arrays
from ..policy import ActionChoice, ActionSchema

STAY_ON_BASE = 0.9
REBOOT_PROB = 0.04
RESET_COST = 0.75


class ModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class SysState:
    """Dependency edge (i, j) means machine j depends on machine i."""

    n: int
    dep_src: np.ndarray
    dep_dst: np.ndarray
    on: np.ndarray  # bool per machine

    def __post_init__(self):
        for arr in (self.dep_src, self.dep_dst, self.on):
            arr.setflags(write=False)


def generate(n: int, rng: np.random.Generator) -> SysState:
    """Every machine gets 1..3 distinct dependees; everything starts online."""
    if n < 4:
        raise ValueError("need at least 4 machines")
    src, dst = [], []
    others = np.arange(n - 1)
    for i in range(n):
        k = int(rng.integers(1, 4))
        picked = rng.choice(others, size=k, replace=False)
        for j in picked:
            j = int(j)
            dst.append(j if j < i else j + 1)  # skip i itself
            src.append(i)
    return SysState(n, np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                    np.ones(n, dtype=bool))


def stay_on_probability(state: SysState) -> np.ndarray:
    deps = np.bincount(state.dep_dst, minlength=state.n)
    deps_on = np.bincount(state.dep_dst, weights=state.on[state.dep_src].astype(float),
                          minlength=state.n)
    return STAY_ON_BASE * (1.0 + deps_on) / (1.0 + deps)


def step(state: SysState, reset, rng: np.random.Generator,
         single: bool = False) -> tuple[SysState, float]:
    """Reward reads the pre-transition on-bits; resets dominate the noise."""
    reset_idx = np.asarray(sorted(reset), dtype=np.int64)
    if single and len(reset_idx) > 1:
        raise ModeError("single-reset variant allows at most one machine per step")
    reward = float(state.on.sum()) - RESET_COST * len(reset_idx)
    p_on = np.where(state.on, stay_on_probability(state), REBOOT_PROB)
    nxt = rng.random(state.n) < p_on
    nxt[reset_idx] = True
    return SysState(state.n, state.dep_src, state.dep_dst, nxt), reward


def encode(state: SysState) -> StateGraph:
    feats = state.on.astype(float)[:, None]
    types = np.zeros(len(state.dep_src), dtype=np.int64)
    return build_arrays(feats, state.dep_src, state.dep_dst, types,
                        num_edge_types=1, validate=False)


def baseline_action(state: SysState, mode: str, rng: np.random.Generator) -> ActionChoice:
    """-S resets one random offline machine (or nothing); -M resets them all."""
    offline = np.flatnonzero(~state.on)
    if mode == "s":
        if len(offline) == 0:
            return ActionChoice(0)
        return ActionChoice(1, params=(int(rng.choice(offline)),))
    if mode == "m":
        return ActionChoice(0, subset=frozenset(int(i) for i in offline))
    raise ModeError(f"unknown mode {mode!r}")


def save_instance(state: SysState) -> str:
    lines = [str(state.n)]
    lines.extend(f"{int(s)} {int(d)}" for s, d in zip(state.dep_src, state.dep_dst))
    return "\n".join(lines) + "\n"


def load_instance(text: str) -> SysState:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    n = int(lines[0])
    pairs = [tuple(int(x) for x in ln.split()) for ln in lines[1:]]
    src = np.asarray([p[0] for p in pairs], dtype=np.int64)
    dst = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return SysState(n, src, dst, np.ones(n, dtype=bool))


class SysAdminEnv:
    """Adapter; mode 's' exposes noop+reset(c), mode 'm' one subset reset."""

    node_feature_width = 1
    edge_feature_width = 0
    num_edge_types = 1
    global_context_width = 0
    supports_optimality = False

    def __init__(self, n: int, mode: str):
        if mode not in ("s", "m"):
            raise ModeError(f"mode must be 's' or 'm', got {mode!r}")
        self.n = n
        self.mode = mode
        self.name = f"sysadmin_{mode}"

    def size_label(self) -> str:
        return str(self.n)

    def schemas(self) -> list[ActionSchema]:
        if self.mode == "s":
            return [ActionSchema(0, "noop", "elementary"),
                    ActionSchema(1, "reset", "parametric", 1)]
        return [ActionSchema(0, "reset_set", "set")]

    def generate(self, rng: np.random.Generator) -> SysState:
        return generate(self.n, rng)

    def is_solved(self, state: SysState) -> bool:
        return False

    def encode(self, state: SysState) -> StateGraph:
        return encode(state)

    def to_reset(self, choice: ActionChoice):
        if self.mode == "s":
            return () if choice.schema_id == 0 else (choice.params[0],)
        return choice.subset

    def apply(self, state: SysState, choice: ActionChoice, rng: np.random.Generator):
        nxt, reward = step(state, self.to_reset(choice), rng, single=self.mode == "s")
        return nxt, reward, False

    def max_entropy(self, state: SysState) -> float:
        if self.mode == "s":
            return math.log(self.n + 1)
        return self.n * math.log(2.0)
