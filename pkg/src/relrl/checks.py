"""Verification suites shared by the CLI and the test suite: full-pipeline
gradient checks and brute-force policy-normalization checks."""
from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .encoder import encode
from .envs import make_env
from .envs.blockworld import free_blocks
from .envs.sokoban import load_level
from .graph import disjoint_union
from .model import Model, config_for
from .params import GradCheckReport, grad_check, randomize
from .policy import ActionChoice, action_log_probs, sample_action, value

_SMALL_LEVEL = """\
######
#.   #
# $@ #
######
"""


def smallest_instance(domain: str):
    """A minimal (env, state) pair per domain, fixed for reproducibility."""
    if domain == "blockworld":
        env = make_env("blockworld", n=2)
        rng = np.random.default_rng(11)
        state = env.generate(rng)
        while env.is_solved(state):
            state = env.generate(rng)
        return env, state
    if domain == "sokoban":
        env = make_env("sokoban", width=6, height=4, boxes=1)
        return env, load_level(_SMALL_LEVEL)
    if domain in ("sysadmin_s", "sysadmin_m"):
        env = make_env(domain, n=4)
        return env, env.generate(np.random.default_rng(11))
    raise ValueError(f"unknown domain {domain!r}")


def gradcheck_pipeline(domain: str, emb_size: int = 8, mp_steps: int = 2,
                       seed: int = 0, epsilon: float = 1e-5,
                       tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of encode -> replayed log-prob -> value on the
    domain's smallest instance, in double precision."""
    env, state = smallest_instance(domain)
    schemas = env.schemas()
    model = Model.build(config_for(env, emb_size, mp_steps), seed)
    randomize(model.store, np.random.default_rng(seed + 1))
    graph = env.encode(state)
    action = sample_action(graph, model.store, model.cfg, schemas,
                           np.random.default_rng(seed + 2), state=state)

    def build_loss(store):
        batch = disjoint_union([graph])
        logp = action_log_probs(batch, store, model.cfg, schemas, [action], states=[state])
        v = value(store, encode(store, model.cfg, batch))
        return ad.add(ad.vsum(logp), ad.vsum(v))

    return grad_check(build_loss, model.store, epsilon=epsilon, tolerance=tolerance)


def enumerate_grounded(env, state) -> list[ActionChoice]:
    """Every grounded action of the state, for brute-force normalization."""
    name = env.name
    if name == "blockworld":
        free = free_blocks(state.n, state.on)
        actions = []
        for x in np.flatnonzero(free):
            for y in list(np.flatnonzero(free)) + [state.n]:
                if y != x:
                    actions.append(ActionChoice(0, params=(int(x), int(y))))
        return actions
    if name == "sokoban":
        n = env.encode(state).node_count
        return [ActionChoice(sid, params=(node,))
                for sid in range(5) for node in range(n)]
    if name == "sysadmin_s":
        return [ActionChoice(0)] + [ActionChoice(1, params=(c,)) for c in range(state.n)]
    if name == "sysadmin_m":
        return [ActionChoice(0, subset=frozenset(sub))
                for r in range(state.n + 1)
                for sub in itertools.combinations(range(state.n), r)]
    raise ValueError(f"no enumeration for {name!r}")


def normalization_check(domain: str, size: dict, settings: int = 100,
                        emb_size: int = 8, mp_steps: int = 2, seed: int = 0) -> dict:
    """For random parameter settings, sum the policy over every grounded
    action; reports the worst deviation from 1. Runs in double precision."""
    env = make_env(domain, **size)
    schemas = env.schemas()
    rng = np.random.default_rng(seed)
    worst = 0.0
    sums = []
    for _ in range(settings):
        state = env.generate(rng)
        while env.is_solved(state):
            state = env.generate(rng)
        model = Model.build(config_for(env, emb_size, mp_steps),
                            int(rng.integers(0, 2**31)))
        store = model.store.astype(np.float64)
        randomize(store, rng, scale=0.5)
        actions = enumerate_grounded(env, state)
        graph = env.encode(state)
        batch = disjoint_union([graph] * len(actions))
        with ad.no_grad():
            logp = action_log_probs(batch, store, model.cfg, schemas, actions,
                                    states=[state] * len(actions))
        total = float(np.exp(logp.data).sum())
        sums.append(total)
        worst = max(worst, abs(total - 1.0))
    return {"domain": domain, "settings": settings, "actions": len(sums) and len(actions),
            "max_abs_deviation": worst, "sums": sums}
