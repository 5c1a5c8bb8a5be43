"""Model bundle: structural configuration, parameter store, checkpoint glue."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import init_encoder_params
from .params import ParameterStore, TargetStore, load_checkpoint, save_checkpoint
from .policy import ActionSchema, init_decoder_params


class SchemaMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SchemaSig:
    name: str
    kind: str
    arity: int


@dataclass(frozen=True)
class ModelConfig:
    node_feature_width: int
    edge_feature_width: int
    num_edge_types: int
    global_context_width: int
    emb_size: int
    mp_steps: int
    schemas: tuple[SchemaSig, ...]


def config_for(env, emb_size: int, mp_steps: int) -> ModelConfig:
    """Structural config for a domain adapter exposing widths and schemas."""
    return ModelConfig(
        node_feature_width=env.node_feature_width,
        edge_feature_width=env.edge_feature_width,
        num_edge_types=env.num_edge_types,
        global_context_width=env.global_context_width,
        emb_size=emb_size,
        mp_steps=mp_steps,
        schemas=tuple(SchemaSig(s.name, s.kind, s.arity) for s in env.schemas()),
    )


def check_schemas(cfg: ModelConfig, schemas: list[ActionSchema]) -> None:
    sigs = tuple(SchemaSig(s.name, s.kind, s.arity) for s in schemas)
    if sigs != cfg.schemas:
        raise SchemaMismatchError(
            f"model was built for schemas {cfg.schemas}, domain provides {sigs}")


class Model:
    """Parameter store plus the structural config needed to rebuild it."""

    def __init__(self, cfg: ModelConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        store = ParameterStore(dtype=np.float32)
        init_encoder_params(store, cfg, rng)
        init_decoder_params(store, cfg, rng)
        return cls(cfg, store)

    def make_target(self) -> TargetStore:
        return TargetStore.from_store(self.store)

    def save(self, path, extra: dict[str, str] | None = None) -> None:
        meta = {
            "node_feature_width": str(self.cfg.node_feature_width),
            "edge_feature_width": str(self.cfg.edge_feature_width),
            "num_edge_types": str(self.cfg.num_edge_types),
            "global_context_width": str(self.cfg.global_context_width),
            "emb_size": str(self.cfg.emb_size),
            "mp_steps": str(self.cfg.mp_steps),
            "schemas": ";".join(f"{s.name}:{s.kind}:{s.arity}" for s in self.cfg.schemas),
        }
        for key, val in (extra or {}).items():
            meta[f"x.{key}"] = str(val)
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path) -> tuple["Model", dict[str, str]]:
        store, meta = load_checkpoint(path)
        schemas = tuple(
            SchemaSig(name, kind, int(arity))
            for name, kind, arity in (part.split(":") for part in meta["schemas"].split(";"))
        )
        cfg = ModelConfig(
            node_feature_width=int(meta["node_feature_width"]),
            edge_feature_width=int(meta["edge_feature_width"]),
            num_edge_types=int(meta["num_edge_types"]),
            global_context_width=int(meta["global_context_width"]),
            emb_size=int(meta["emb_size"]),
            mp_steps=int(meta["mp_steps"]),
            schemas=schemas,
        )
        extra = {k[2:]: v for k, v in meta.items() if k.startswith("x.")}
        return cls(cfg, store), extra
