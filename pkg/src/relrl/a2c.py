"""Synchronous advantage actor-critic with a Polyak target network.

One gradient step per environment step, over a batch of parallel
environments. Bootstrap targets come from the target copy and are clipped
into a fixed range; the entropy bonus uses the sampled-gradient form, each
state's term normalized by its maximum possible entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .encoder import encode
from .graph import StateGraph, disjoint_union
from .model import Model, check_schemas
from .params import TargetStore, adamw_step, clip_grad_norm, polyak_update
from .policy import ActionChoice, decode_batch, value

TERM_NONE = "none"
TERM_ENV = "terminal"
TERM_TRUNC = "truncation"


@dataclass
class Hyperparams:
    p_envs: int = 256
    rho: float = 0.005
    gamma: float = 0.99
    epoch: int = 1000
    step_limit: int = 100
    mp_steps: int = 3
    emb_size: int = 32
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    grad_max_norm: float = 3.0
    q_low: float = -15.0
    q_high: float = 15.0
    alpha_v: float = 0.1
    alpha_h_start: float = 1e-4
    alpha_h_end: float = 5e-5
    weight_decay: float = 1e-4
    entropy_norm: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.q_low >= self.q_high:
            raise ValueError("q_range is empty")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")


@dataclass
class Transition:
    state: object
    graph: StateGraph
    action: ActionChoice
    reward: float
    next_graph: StateGraph
    terminal: str
    max_entropy: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if self.terminal not in (TERM_NONE, TERM_ENV, TERM_TRUNC):
            raise ValueError(f"unknown terminal flavor {self.terminal!r}")


def lr_at(step: int, hp: Hyperparams) -> float:
    return max(hp.lr_end, hp.lr_start * 0.5 ** (step // (20 * hp.epoch)))


def alpha_h_at(step: int, hp: Hyperparams) -> float:
    t = 1 + step // hp.epoch
    return max(hp.alpha_h_end, hp.alpha_h_start / t)


def q_target(reward: float, terminal: str, next_value: float, gamma: float,
             q_range: tuple[float, float]) -> float:
    """Terminal transitions take the bare reward; truncations bootstrap."""
    if terminal == TERM_ENV:
        q = reward
    else:
        q = reward + gamma * next_value
    return float(min(max(q, q_range[0]), q_range[1]))


@dataclass
class LossTerms:
    policy: Tensor
    value_loss: Tensor
    entropy: Tensor | None
    mean_q: float
    mean_value: float
    mean_advantage: float
    entropy_estimate: float

    def total(self, alpha_v: float, alpha_h: float) -> Tensor:
        loss = ad.add(self.policy, ad.scale(self.value_loss, alpha_v))
        if self.entropy is not None:
            loss = ad.add(loss, ad.scale(self.entropy, alpha_h))
        return loss


def _q_targets(transitions: list[Transition], target: TargetStore, cfg,
               hp: Hyperparams) -> np.ndarray:
    next_batch = disjoint_union([t.next_graph for t in transitions])
    with no_grad():
        next_values = value(target, encode(target, cfg, next_batch)).data
    return np.array([
        q_target(t.reward, t.terminal, float(next_values[i]), hp.gamma,
                 (hp.q_low, hp.q_high))
        for i, t in enumerate(transitions)
    ], dtype=np.float64)


def _assemble(logp: Tensor, v: Tensor, q: np.ndarray, h_max: np.ndarray,
              hp: Hyperparams) -> LossTerms:
    """Combine replayed log-probs and values into the three loss terms.

    The advantage and the first entropy factor are detached; only the
    log-probabilities and the value head carry gradient.
    """
    B = len(q)
    adv = q - v.data.astype(np.float64)
    policy = ad.dot_const(logp, (-adv / B).astype(logp.data.dtype))
    diff = ad.add(v, ad.constant((-q).astype(v.data.dtype)))
    value_loss = ad.scale(ad.vsum(ad.square(diff)), 1.0 / B)

    if hp.entropy_norm:
        included = np.flatnonzero(h_max > 0.0)
    else:
        h_max = np.ones(B)
        included = np.arange(B)
    entropy = None
    entropy_estimate = 0.0
    if len(included):
        lp_det = logp.data.astype(np.float64)[included]
        coef = lp_det / h_max[included] / len(included)
        entropy = ad.dot_const(ad.gather_vec(logp, included),
                               coef.astype(logp.data.dtype))
        entropy_estimate = float(np.mean(-lp_det / h_max[included]))

    return LossTerms(
        policy=policy,
        value_loss=value_loss,
        entropy=entropy,
        mean_q=float(q.mean()),
        mean_value=float(v.data.mean()),
        mean_advantage=float(adv.mean()),
        entropy_estimate=entropy_estimate,
    )


def a2c_losses(transitions: list[Transition], model: Model, target: TargetStore,
               schemas, hp: Hyperparams) -> LossTerms:
    """Replay a batch of transitions under the current parameters and build
    the loss terms; each action is re-scored under its recorded masks."""
    if not transitions:
        raise ValueError("empty batch")
    cfg = model.cfg
    q = _q_targets(transitions, target, cfg, hp)
    batch = disjoint_union([t.graph for t in transitions])
    try:
        result = decode_batch(batch, model.store, cfg, schemas,
                              states=[t.state for t in transitions],
                              actions=[t.action for t in transitions])
    except Exception as err:
        raise RuntimeError(
            f"replay failed for batch of {len(transitions)} transitions: {err}") from err
    v = value(model.store, result.emb)
    h_max = np.array([t.max_entropy for t in transitions])
    return _assemble(result.log_probs, v, q, h_max, hp)


@dataclass
class _Slot:
    state: object
    graph: StateGraph
    rng: np.random.Generator
    steps: int = 0
    ret: float = 0.0


@dataclass
class EpochStats:
    episodes: int = 0
    solved: int = 0
    return_sum: float = 0.0
    length_sum: float = 0.0
    steps: int = 0
    loss_policy: float = 0.0
    loss_value: float = 0.0
    entropy_est: float = 0.0
    grad_norm: float = 0.0

    def row(self, epoch: int, hp: Hyperparams, global_step: int) -> dict:
        n = max(self.steps, 1)
        ep = max(self.episodes, 1)
        return {
            "epoch": epoch,
            "env_steps": global_step * hp.p_envs,
            "episodes": self.episodes,
            "mean_return": self.return_sum / ep if self.episodes else 0.0,
            "solved_frac": self.solved / ep if self.episodes else 0.0,
            "mean_length": self.length_sum / ep if self.episodes else 0.0,
            "loss_policy": self.loss_policy / n,
            "loss_value": self.loss_value / n,
            "entropy_est": self.entropy_est / n,
            "grad_norm": self.grad_norm / n,
            "lr": lr_at(global_step - 1, hp),
            "alpha_h": alpha_h_at(global_step - 1, hp),
        }


METRIC_COLUMNS = ["epoch", "env_steps", "episodes", "mean_return", "solved_frac",
                  "mean_length", "loss_policy", "loss_value", "entropy_est",
                  "grad_norm", "lr", "alpha_h"]


class Trainer:
    """Steps p_envs environments in lockstep; one optimizer step per env step."""

    def __init__(self, env, model: Model, hp: Hyperparams, seed: int):
        self.env = env
        self.model = model
        self.hp = hp
        self.schemas = env.schemas()
        check_schemas(model.cfg, self.schemas)
        self.target = model.make_target()
        self.step = 0
        ss = np.random.SeedSequence([seed, 0xE17])
        self.slots = [self._fresh_slot(np.random.default_rng(child))
                      for child in ss.spawn(hp.p_envs)]

    def _fresh_slot(self, rng) -> _Slot:
        state = self._fresh_state(rng)
        return _Slot(state, self.env.encode(state), rng)

    def _fresh_state(self, rng):
        state = self.env.generate(rng)
        while self.env.is_solved(state):  # degenerate draws carry no experience
            state = self.env.generate(rng)
        return state

    def _reset_slot(self, slot: _Slot) -> None:
        slot.state = self._fresh_state(slot.rng)
        slot.graph = self.env.encode(slot.state)
        slot.steps = 0
        slot.ret = 0.0

    def train_step(self, stats: EpochStats | None = None) -> None:
        env, hp = self.env, self.hp
        batch = disjoint_union([slot.graph for slot in self.slots])
        states = [slot.state for slot in self.slots]
        rngs = [slot.rng for slot in self.slots]
        # sample with the tape on: when no backtracking occurred the recorded
        # log-probs equal what a replay would compute, so the sampling pass
        # doubles as the loss forward pass
        decoded = decode_batch(batch, self.model.store, self.model.cfg,
                               self.schemas, states=states, rngs=rngs)
        choices = decoded.choices

        transitions = []
        for slot, choice in zip(self.slots, choices):
            next_state, reward, terminal = env.apply(slot.state, choice, slot.rng)
            slot.steps += 1
            slot.ret += reward
            next_graph = env.encode(next_state)
            if terminal:
                flavor = TERM_ENV
            elif slot.steps >= hp.step_limit:
                flavor = TERM_TRUNC
            else:
                flavor = TERM_NONE
            transitions.append(Transition(slot.state, slot.graph, choice, reward,
                                          next_graph, flavor,
                                          env.max_entropy(slot.state)))
            if flavor == TERM_NONE:
                slot.state = next_state
                slot.graph = next_graph
            else:
                if stats is not None:
                    stats.episodes += 1
                    stats.solved += int(flavor == TERM_ENV)
                    stats.return_sum += slot.ret
                    stats.length_sum += slot.steps
                self._reset_slot(slot)

        if decoded.used_fallback:
            # a backtracked graph's tape holds pre-backtrack levels; rescore
            terms = a2c_losses(transitions, self.model, self.target, self.schemas, hp)
        else:
            q = _q_targets(transitions, self.target, self.model.cfg, hp)
            v = value(self.model.store, decoded.emb)
            h_max = np.array([t.max_entropy for t in transitions])
            terms = _assemble(decoded.log_probs, v, q, h_max, hp)
        alpha_h = alpha_h_at(self.step, hp)
        loss = terms.total(hp.alpha_v, alpha_h)
        self.model.store.zero_grads()
        loss.backward()
        raw_norm = self.model.store.grad_norm()
        clip_grad_norm(self.model.store, hp.grad_max_norm)
        adamw_step(self.model.store, lr_at(self.step, hp), hp.weight_decay)
        polyak_update(self.target, self.model.store, hp.rho)
        self.step += 1

        if stats is not None:
            stats.steps += 1
            stats.loss_policy += float(terms.policy.data)
            stats.loss_value += float(terms.value_loss.data)
            stats.entropy_est += terms.entropy_estimate
            stats.grad_norm += raw_norm

    def run_epoch(self, epoch: int) -> dict:
        stats = EpochStats()
        for _ in range(self.hp.epoch):
            self.train_step(stats)
        return stats.row(epoch, self.hp, self.step)
