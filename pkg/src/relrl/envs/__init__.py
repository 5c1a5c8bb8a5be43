"""Benchmark domains and the adapter registry used by the harness."""
from __future__ import annotations

import glob
import os

from .blockworld import BlockWorldEnv
from .sokoban import SokobanEnv, load_level_file
from .sysadmin import SysAdminEnv


def load_level_dir(path: str) -> list:
    levels = []
    for name in sorted(glob.glob(os.path.join(path, "*.txt"))):
        with open(name) as fh:
            levels.extend(load_level_file(fh.read()))
    if not levels:
        raise ValueError(f"no levels found under {path!r}")
    return levels


def make_env(domain: str, **size):
    if domain == "blockworld":
        return BlockWorldEnv(n=int(size["n"]))
    if domain == "sokoban":
        levels = size.get("levels")
        if size.get("level_dir"):
            levels = load_level_dir(size["level_dir"])
        if levels is not None:
            shape = levels[0].shape
            return SokobanEnv(width=shape[1], height=shape[0],
                              num_boxes=int(levels[0].boxes.sum()), levels=levels)
        return SokobanEnv(width=int(size["width"]), height=int(size["height"]),
                          num_boxes=int(size["boxes"]))
    if domain == "sysadmin_s":
        return SysAdminEnv(n=int(size["n"]), mode="s")
    if domain == "sysadmin_m":
        return SysAdminEnv(n=int(size["n"]), mode="m")
    raise ValueError(f"unknown domain {domain!r}")


DOMAINS = ("blockworld", "sokoban", "sysadmin_s", "sysadmin_m")
