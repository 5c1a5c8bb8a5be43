"""Run configuration, the train/eval protocol, and metric files."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .a2c import METRIC_COLUMNS, Hyperparams, Trainer
from .envs import make_env
from .envs.sysadmin import baseline_action
from .model import Model, check_schemas, config_for
from .policy import sample_actions_batch
from .graph import disjoint_union

# per-domain defaults: everything the trainer needs, straight from the
# published experiment settings
_BASE = dict(p_envs=256, rho=0.005, gamma=0.99, alpha_v=0.1, weight_decay=1e-4)

ALPHA_H_SYSADMIN = {
    "s": {5: 0.3, 10: 0.3, 20: 1.0, 40: 1.0, 80: 2.0, 160: 2.0},
    "m": {5: 0.3, 10: 0.3, 20: 3.0, 40: 10.0, 80: 20.0, 160: 24.0},
}


def default_hyperparams(domain: str, size: dict) -> Hyperparams:
    if domain == "blockworld":
        return Hyperparams(**_BASE, epoch=1000, step_limit=100, mp_steps=3, emb_size=32,
                           lr_start=3e-4, lr_end=1e-5, grad_max_norm=3.0,
                           q_low=-15.0, q_high=15.0,
                           alpha_h_start=1e-4, alpha_h_end=5e-5)
    if domain == "sokoban":
        return Hyperparams(**_BASE, epoch=1000, step_limit=200, mp_steps=10, emb_size=64,
                           lr_start=3e-3, lr_end=1e-4, grad_max_norm=5.0,
                           q_low=-15.0, q_high=15.0,
                           alpha_h_start=0.2, alpha_h_end=0.1)
    if domain in ("sysadmin_s", "sysadmin_m"):
        n = int(size["n"])
        table = ALPHA_H_SYSADMIN[domain[-1]]
        key = min(table, key=lambda k: (abs(k - n), k))
        start = table[key]
        return Hyperparams(**_BASE, epoch=100, step_limit=100, mp_steps=5, emb_size=32,
                           lr_start=3e-3, lr_end=1e-4, grad_max_norm=3.0,
                           q_low=-100.0, q_high=200.0 * n,
                           alpha_h_start=start, alpha_h_end=start / 2)
    raise ValueError(f"unknown domain {domain!r}")


@dataclass
class RunConfig:
    domain: str
    size: dict
    hp: Hyperparams
    seed: int = 0
    epochs: int = 10
    checkpoint_every: int = 10
    out_dir: str | None = None


_SIZE_KEYS = ("n", "width", "height", "boxes")


def build_run_config(raw: dict[str, str]) -> RunConfig:
    """Assemble a RunConfig from flat key/value settings; unknown keys fail."""
    raw = dict(raw)
    domain = raw.pop("domain", None)
    if domain is None:
        raise ValueError("config needs a 'domain'")
    size = {k: int(raw.pop(k)) for k in _SIZE_KEYS if k in raw}
    if "level_dir" in raw:
        size["level_dir"] = raw.pop("level_dir")
    hp = default_hyperparams(domain, size)
    hp_fields = {f.name: f for f in dataclasses.fields(Hyperparams)}
    updates = {}
    for key in list(raw):
        if key in hp_fields:
            updates[key] = _coerce(raw.pop(key), hp_fields[key].type)
    hp = dataclasses.replace(hp, **updates)
    cfg = RunConfig(domain=domain, size=size, hp=hp)
    for key in ("seed", "epochs", "checkpoint_every"):
        if key in raw:
            setattr(cfg, key, int(raw.pop(key)))
    if "out_dir" in raw:
        cfg.out_dir = raw.pop("out_dir")
    if raw:
        raise ValueError(f"unknown config keys: {sorted(raw)}")
    return cfg


def _coerce(text: str, typ: str):
    text = str(text)
    if typ in ("int", int):
        return int(text)
    if typ in ("bool", bool):
        if text.lower() in ("1", "true", "on", "yes"):
            return True
        if text.lower() in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return float(text)


def parse_config_file(text: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def format_csv_row(values) -> str:
    parts = []
    for v in values:
        parts.append(repr(v) if isinstance(v, float) else str(v))
    return ",".join(parts)


def train(config: RunConfig, model: Model | None = None, log=None, stop=None):
    """Run epochs of training, appending one metrics row per epoch.

    ``stop`` may inspect each row and end training early (plateau/target
    logic belongs to the caller). Returns (model, rows).
    """
    env = make_env(config.domain, **config.size)
    if model is None:
        model = Model.build(config_for(env, config.hp.emb_size, config.hp.mp_steps),
                            config.seed)
    trainer = Trainer(env, model, config.hp, config.seed)

    metrics_path = None
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        metrics_path = os.path.join(config.out_dir, "metrics.csv")
        with open(metrics_path, "w") as fh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")

    rows = []
    for epoch in range(config.epochs):
        row = trainer.run_epoch(epoch)
        rows.append(row)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(format_csv_row(row[c] for c in METRIC_COLUMNS) + "\n")
        if log:
            log(f"epoch {epoch}: solved {row['solved_frac']:.3f} "
                f"return {row['mean_return']:.2f} len {row['mean_length']:.1f}")
        if config.out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            model.save(os.path.join(config.out_dir, f"checkpoint_{epoch + 1:04d}.rlc"),
                       checkpoint_meta(config))
        if stop and stop(row):
            break
    if config.out_dir:
        model.save(os.path.join(config.out_dir, "checkpoint_final.rlc"),
                   checkpoint_meta(config))
    return model, rows


def checkpoint_meta(config: RunConfig) -> dict[str, str]:
    meta = {"domain": config.domain, "seed": str(config.seed)}
    for key, val in config.size.items():
        meta[f"size.{key}"] = str(val)
    for f in dataclasses.fields(Hyperparams):
        meta[f"hp.{f.name}"] = str(getattr(config.hp, f.name))
    return meta


def evaluate(env, model: Model, episodes: int, step_limit: int, seed: int,
             greedy: bool = False, optimality: bool | None = None,
             chunk_size: int = 256) -> dict:
    """Roll fresh instances under the policy; solved %, returns, optimality.

    Exactly ``episodes`` instances are drawn from one instance stream, so
    reports are reproducible per seed. SysAdmin reports add the score of the
    domain baseline on the same instances.
    """
    schemas = env.schemas()
    check_schemas(model.cfg, schemas)
    root = np.random.SeedSequence([seed, 0x0E7A1])
    ss_inst, ss_act, ss_base = root.spawn(3)
    inst_rng = np.random.default_rng(ss_inst)

    instances = []
    while len(instances) < episodes:
        state = env.generate(inst_rng)
        if not env.is_solved(state):
            instances.append(state)

    act_children = ss_act.spawn(episodes)
    solved = np.zeros(episodes, dtype=bool)
    steps = np.zeros(episodes, dtype=np.int64)
    returns = np.zeros(episodes, dtype=np.float64)

    for lo in range(0, episodes, chunk_size):
        idx = list(range(lo, min(lo + chunk_size, episodes)))
        states = {i: instances[i] for i in idx}
        rngs = {i: np.random.default_rng(act_children[i]) for i in idx}
        active = list(idx)
        while active:
            graphs = [env.encode(states[i]) for i in active]
            batch = disjoint_union(graphs)
            choices = sample_actions_batch(batch, model.store, model.cfg, schemas,
                                           [rngs[i] for i in active],
                                           states=[states[i] for i in active],
                                           greedy=greedy)
            still = []
            for i, choice in zip(active, choices):
                nxt, reward, terminal = env.apply(states[i], choice, rngs[i])
                steps[i] += 1
                returns[i] += reward
                states[i] = nxt
                if terminal:
                    solved[i] = True
                elif steps[i] < step_limit:
                    still.append(i)
            active = still

    report = {
        "domain": env.name,
        "size": env.size_label(),
        "episodes": episodes,
        "solved_frac": float(solved.mean()),
        "mean_return": float(returns.mean()),
        "mean_steps": float(steps.mean()),
    }

    if optimality is None:
        optimality = env.supports_optimality and getattr(env, "n", 99) <= 8
    if optimality:
        ratios = np.zeros(episodes)
        for i, inst in enumerate(instances):
            if solved[i]:
                ratios[i] = env.optimal_steps(inst) / steps[i]
        report["optimality"] = float(ratios.mean())

    if env.name.startswith("sysadmin"):
        base_children = ss_base.spawn(episodes)
        base_returns = np.zeros(episodes)
        mode = env.mode
        for i, inst in enumerate(instances):
            rng = np.random.default_rng(base_children[i])
            state, total = inst, 0.0
            for _ in range(step_limit):
                choice = baseline_action(state, mode, rng)
                state, reward, _ = env.apply(state, choice, rng)
                total += reward
            base_returns[i] = total
        report["baseline_return"] = float(base_returns.mean())
        report["normalized_return"] = float(returns.mean() / base_returns.mean())
    return report


REPORT_COLUMNS = ["domain", "size", "episodes", "solved_frac", "mean_return",
                  "mean_steps", "optimality", "baseline_return", "normalized_return"]


def generalize(domain: str, model: Model, sizes: list[dict], episodes: int,
               step_limit: int, seed: int, greedy: bool = False, log=None) -> list[dict]:
    """Evaluate one model across a size sweep without retraining."""
    reports = []
    for size in sizes:
        env = make_env(domain, **size)
        report = evaluate(env, model, episodes, step_limit, seed, greedy=greedy)
        reports.append(report)
        if log:
            log(f"{domain} {report['size']}: solved {report['solved_frac']:.3f}")
    return reports


def write_report_csv(path, reports: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for rep in reports:
            fh.write(format_csv_row(rep.get(c, "") for c in REPORT_COLUMNS) + "\n")
