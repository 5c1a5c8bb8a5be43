"""Named parameter storage, the AdamW update, target tracking and checkpoints."""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, grad_enabled


class ParamError(KeyError):
    pass


class ConsistencyError(RuntimeError):
    pass


class ParameterStore:
    """Flat name -> array collection with per-entry gradient accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.entries: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add_param(self, name: str, values: np.ndarray) -> None:
        if name in self.entries:
            raise ParamError(f"duplicate parameter {name!r}")
        arr = np.array(values, dtype=self.dtype)
        self.entries[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def add_linear(self, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        """Weights uniform in +-1/sqrt(fan_in), zero bias."""
        bound = 1.0 / np.sqrt(max(n_in, 1))
        self.add_param(f"{name}/W", rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.add_param(f"{name}/b", np.zeros(n_out))

    def value(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise ParamError(f"unknown parameter {name!r}") from None

    def tensor(self, name: str) -> Tensor:
        values = self.value(name)
        if not grad_enabled():
            return Tensor(values)
        grad_slot = self.grads[name]

        def bwd(g):
            grad_slot[...] += g

        t = Tensor(values, parents=(), bwd=bwd, requires_grad=True)
        return t

    def names(self) -> list[str]:
        return list(self.entries)

    def num_coords(self) -> int:
        return sum(v.size for v in self.entries.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.dot(g.ravel(), g.ravel()))
        return float(np.sqrt(total))

    def astype(self, dtype) -> "ParameterStore":
        clone = ParameterStore(dtype=dtype)
        for name, values in self.entries.items():
            clone.add_param(name, values)
        clone.step_count = self.step_count
        return clone


class TargetStore:
    """Values-only copy of a ParameterStore, updated by Polyak averaging."""

    def __init__(self, entries: dict[str, np.ndarray], dtype):
        self.entries = entries
        self.dtype = np.dtype(dtype)

    @classmethod
    def from_store(cls, store: ParameterStore) -> "TargetStore":
        return cls({k: v.copy() for k, v in store.entries.items()}, store.dtype)

    def value(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise ParamError(f"unknown parameter {name!r}") from None

    def tensor(self, name: str) -> Tensor:
        return Tensor(self.value(name))


def polyak_update(target: TargetStore, source: ParameterStore, rho: float) -> None:
    """target := (1 - rho) * target + rho * source, entrywise."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if set(target.entries) != set(source.entries):
        raise ConsistencyError("target/source parameter names differ")
    for name, tv in target.entries.items():
        sv = source.entries[name]
        tv *= 1.0 - rho
        tv += rho * sv


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = store.grad_norm()
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in store.grads.values():
        g *= factor
    return factor


def adamw_step(
    store: ParameterStore,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay adaptive update; clears gradients afterwards."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.entries.items():
        g = store.grads[name]
        m = store._adam_m.get(name)
        if m is None:
            m = store._adam_m[name] = np.zeros_like(p)
        v = store._adam_v.get(name)
        if v is None:
            v = store._adam_v[name] = np.zeros_like(p)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grads()


def randomize(store: ParameterStore, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Jitter every entry; keeps finite-difference probes off activation kinks."""
    for name in store.names():
        arr = store.entries[name]
        arr += rng.normal(0.0, scale, size=arr.shape).astype(arr.dtype)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    checked: int
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: {self.checked} coords, max rel err {self.max_rel_err:.3e}"


def grad_check(build_loss, store: ParameterStore, epsilon: float = 1e-5,
               tolerance: float = 1e-4, max_failures: int = 20) -> GradCheckReport:
    """Compare recorded gradients against central differences, in float64.

    ``build_loss`` must be a deterministic function of the store it is given
    and return a scalar Tensor.
    """
    work = store.astype(np.float64)
    loss = build_loss(work)
    loss.backward()
    analytic = {name: work.grads[name].copy() for name in work.names()}

    max_rel = 0.0
    checked = 0
    failures: list[tuple[str, int, float, float]] = []
    for name in work.names():
        values = work.entries[name]
        flat = values.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(build_loss(work).data)
            flat[i] = orig - epsilon
            down = float(build_loss(work).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            max_rel = max(max_rel, rel)
            checked += 1
            if rel > tolerance and len(failures) < max_failures:
                failures.append((name, i, float(a_flat[i]), numeric))
    return GradCheckReport(passed=not failures, max_rel_err=max_rel,
                           checked=checked, failures=failures)


# ---------------------------------------------------------------------------
# checkpoint archive: manifest.txt + one little-endian float32 blob per entry

_CKPT_TAG = "relrl-checkpoint 1"


def save_checkpoint(path, store: ParameterStore, meta: dict[str, str] | None = None) -> None:
    meta = meta or {}
    lines = [_CKPT_TAG, f"step_count {store.step_count}"]
    for key, val in meta.items():
        if any(c.isspace() for c in key):
            raise ValueError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {val}")
    for name, values in store.entries.items():
        shape = ",".join(str(d) for d in values.shape)
        lines.append(f"param {name} {shape if shape else '-'}")
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.txt", "\n".join(lines) + "\n")
        for name, values in store.entries.items():
            zf.writestr(f"data/{name}", values.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, dict[str, str]]:
    store = ParameterStore(dtype=np.float32)
    meta: dict[str, str] = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = zf.read("manifest.txt").decode().splitlines()
        if not manifest or manifest[0] != _CKPT_TAG:
            raise ConsistencyError(f"{path}: not a checkpoint archive")
        params: list[tuple[str, tuple[int, ...]]] = []
        for line in manifest[1:]:
            if not line.strip():
                continue
            kind, rest = line.split(" ", 1)
            if kind == "step_count":
                store.step_count = int(rest)
            elif kind == "meta":
                key, val = rest.split(" ", 1)
                meta[key] = val
            elif kind == "param":
                name, shape_s = rest.rsplit(" ", 1)
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                params.append((name, shape))
            else:
                raise ConsistencyError(f"unknown manifest line {line!r}")
        for name, shape in params:
            raw = zf.read(f"data/{name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            store.add_param(name, arr)
    return store, meta
