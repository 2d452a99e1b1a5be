"""Weight-space merge operators.

Every operator works tensor by tensor in float64 and casts the result back to
float32. Experts are reduced in a canonical order (sorted by content digest) so
results do not depend on the order of the expert list.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .tensor_store import ModelCheckpoint, validate_pool

OPERATORS = ("average", "task_arithmetic", "ties", "ties_dare", "model_stock")


@dataclass(frozen=True)
class MergeOperatorConfig:
    operator: str
    lam: float = 1.0
    density: float = 0.5
    drop_rate: float = 0.5
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValidationError(f"unknown merge operator {self.operator!r}; expected one of {OPERATORS}")
        if not math.isfinite(self.lam):
            raise ValidationError("lambda must be finite")
        if not 0.0 < self.density <= 1.0:
            raise ValidationError(f"density must lie in (0, 1], got {self.density}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValidationError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @property
    def label(self) -> str:
        return self.name or self.operator

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["name"] is None:
            del d["name"]
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "MergeOperatorConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown operator config keys: {sorted(unknown)}")
        return cls(**data)


def default_pool() -> list[MergeOperatorConfig]:
    return [
        MergeOperatorConfig("average"),
        MergeOperatorConfig("task_arithmetic", lam=1.0),
        MergeOperatorConfig("ties", density=0.5, lam=1.0),
        MergeOperatorConfig("ties_dare", density=0.5, drop_rate=0.5, lam=1.0),
        MergeOperatorConfig("model_stock"),
    ]


def _digest(ckpt: ModelCheckpoint) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name, arr in ckpt.tensors.items():
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.digest()


def _canonical(experts: Sequence[ModelCheckpoint]) -> list[ModelCheckpoint]:
    return sorted(experts, key=_digest)


def _check(base, experts, minimum):
    if len(experts) < minimum:
        raise ValidationError(f"need at least {minimum} expert(s), got {len(experts)}")
    pool = list(experts) if base is None else [base, *experts]
    return validate_pool(pool)


def _build(spec, tensors: dict[str, np.ndarray]) -> ModelCheckpoint:
    return ModelCheckpoint(spec, {n: a.astype(np.float32) for n, a in tensors.items()})


def task_vectors(base: ModelCheckpoint, experts: Sequence[ModelCheckpoint]) -> list[dict[str, np.ndarray]]:
    """Float64 deltas ``expert - base`` per tensor."""
    return [
        {n: e.tensors[n].astype(np.float64) - base.tensors[n].astype(np.float64) for n in base.tensors}
        for e in experts
    ]


def merge_average(experts: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    spec = _check(None, experts, 2)
    experts = _canonical(experts)
    out = {}
    for name in experts[0].tensors:
        acc = np.zeros(experts[0].tensors[name].shape, dtype=np.float64)
        for e in experts:
            acc += e.tensors[name]
        out[name] = acc / len(experts)
    return _build(spec, out)


def merge_task_arithmetic(base: ModelCheckpoint, experts: Sequence[ModelCheckpoint],
                          lam: float = 1.0) -> ModelCheckpoint:
    spec = _check(base, experts, 1)
    out = {}
    for name, b in base.tensors.items():
        b64 = b.astype(np.float64)
        acc = np.zeros_like(b64)
        for e in _canonical(experts):
            acc += e.tensors[name].astype(np.float64) - b64
        out[name] = b64 + lam * acc
    return _build(spec, out)


def trim_top_density(values: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``ceil(density * numel)`` largest-magnitude entries, zero the rest.

    Magnitude ties at the cut are resolved in flat index order.
    """
    flat = values.reshape(-1)
    keep = min(flat.size, math.ceil(density * flat.size - 1e-9))
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out.reshape(values.shape)


def ties_combine(deltas: Sequence[np.ndarray], density: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean over a list of same-shaped task tensors."""
    trimmed = np.stack([trim_top_density(d, density) for d in deltas])
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (trimmed != 0) & (np.sign(trimmed) == elected)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def apply_dare(task_vector: Mapping[str, np.ndarray], drop_rate: float, seed: int) -> dict[str, np.ndarray]:
    """Drop entries with probability ``drop_rate`` and rescale survivors.

    The random stream for a tensor is keyed by ``seed``, the tensor name and a
    digest of the tensor's contents, never by the position of an expert in a list.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValidationError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    out = {}
    for name, delta in task_vector.items():
        delta = np.asarray(delta, dtype=np.float64)
        if drop_rate == 0.0:
            out[name] = delta.copy()
            continue
        key = hashlib.blake2b(name.encode() + b"\0" + delta.tobytes(), digest_size=16).digest()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *np.frombuffer(key, np.uint32)])))
        survive = rng.random(delta.shape) >= drop_rate
        out[name] = np.where(survive, delta / (1.0 - drop_rate), 0.0)
    return out


def merge_ties(base: ModelCheckpoint, experts: Sequence[ModelCheckpoint], density: float = 0.5,
               lam: float = 1.0, drop_rate: float = 0.0, seed: int = 0) -> ModelCheckpoint:
    if not 0.0 < density <= 1.0:
        raise ValidationError(f"density must lie in (0, 1], got {density}")
    spec = _check(base, experts, 1)
    deltas = task_vectors(base, _canonical(experts))
    if drop_rate > 0.0:
        deltas = [apply_dare(d, drop_rate, seed) for d in deltas]
    out = {}
    for name, b in base.tensors.items():
        merged = ties_combine([d[name] for d in deltas], density)
        out[name] = b.astype(np.float64) + lam * merged
    return _build(spec, out)


def model_stock_ratio(deltas: Sequence[Mapping[str, np.ndarray]]) -> float | None:
    """Global interpolation ratio from mean pairwise cosine; None if all deltas vanish."""
    flats = [np.concatenate([d[n].reshape(-1) for n in sorted(d)]) for d in deltas]
    norms = [float(np.linalg.norm(f)) for f in flats]
    if all(n == 0.0 for n in norms):
        return None
    cosines = []
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                cosines.append(0.0)
            else:
                cosines.append(float(flats[i] @ flats[j]) / (norms[i] * norms[j]))
    cos = float(np.mean(cosines))
    k = len(flats)
    denom = 1.0 + (k - 1) * cos
    t = k * cos / denom if denom > 0 else 0.0
    return min(1.0, max(0.0, t))


def merge_model_stock(base: ModelCheckpoint, experts: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    spec = _check(base, experts, 2)
    experts = _canonical(experts)
    t = model_stock_ratio(task_vectors(base, experts))
    if t is None:
        return base
    out = {}
    for name, b in base.tensors.items():
        mean = np.zeros(b.shape, dtype=np.float64)
        for e in experts:
            mean += e.tensors[name]
        mean /= len(experts)
        out[name] = t * mean + (1.0 - t) * b.astype(np.float64)
    return _build(spec, out)


def apply_operator(cfg: MergeOperatorConfig, base: ModelCheckpoint,
                   experts: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    dispatch: dict[str, Callable[[], ModelCheckpoint]] = {
        "average": lambda: merge_average(experts),
        "task_arithmetic": lambda: merge_task_arithmetic(base, experts, cfg.lam),
        "ties": lambda: merge_ties(base, experts, cfg.density, cfg.lam),
        "ties_dare": lambda: merge_ties(base, experts, cfg.density, cfg.lam, cfg.drop_rate, cfg.seed),
        "model_stock": lambda: merge_model_stock(base, experts),
    }
    return dispatch[cfg.operator]()

