"""Role-span parsing, role-conditioned MLP saliency and top-k neuron sets.

Neuron sets are plain ``frozenset`` objects of ``(block, neuron)`` tuples.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, RoleCoverageError, ValidationError
from .tensor_store import ModelCheckpoint
from .toy_transformer import forward

NeuronSet = frozenset  # of (block_index, neuron_index)


@dataclass(frozen=True)
class RoleRule:
    role_id: str
    start_marker: tuple
    end_marker: tuple
    target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "start_marker", tuple(int(t) for t in self.start_marker))
        object.__setattr__(self, "end_marker", tuple(int(t) for t in self.end_marker))
        if not self.start_marker or not self.end_marker:
            raise ValidationError(f"role {self.role_id!r}: markers must be non-empty")
        if self.start_marker == self.end_marker:
            raise ValidationError(f"role {self.role_id!r}: start and end markers must differ")

    def to_dict(self) -> dict:
        return {"role_id": self.role_id, "start_marker": list(self.start_marker),
                "end_marker": list(self.end_marker), "target": self.target}

    @classmethod
    def from_dict(cls, data: Mapping) -> "RoleRule":
        unknown = set(data) - {"role_id", "start_marker", "end_marker", "target"}
        if unknown:
            raise ValidationError(f"unknown role rule keys: {sorted(unknown)}")
        return cls(data["role_id"], data["start_marker"], data["end_marker"], bool(data.get("target", False)))


def target_role(rules: Sequence[RoleRule]) -> str:
    targets = [r.role_id for r in rules]
    flagged = [r.role_id for r in rules if r.target]
    if len(flagged) != 1:
        raise ValidationError(f"exactly one target role required, found {flagged or 'none'} among {targets}")
    return flagged[0]


@dataclass
class CalibrationTrajectory:
    benchmark_id: str
    token_ids: list
    role_spans: dict = field(default_factory=dict)

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        n = len(self.token_ids)
        spans = {}
        for role, intervals in self.role_spans.items():
            clean = sorted((int(s), int(e)) for s, e in intervals)
            prev_end = 0
            for s, e in clean:
                if not 0 <= s < e <= n:
                    raise ValidationError(f"{self.benchmark_id}: span [{s}, {e}) for role {role!r} out of bounds (len {n})")
                if s < prev_end:
                    raise ValidationError(f"{self.benchmark_id}: overlapping spans for role {role!r}")
                prev_end = e
            spans[role] = clean
        self.role_spans = spans

    def positions(self, role_id: str) -> list[int]:
        return [t for s, e in self.role_spans.get(role_id, ()) for t in range(s, e)]

    def to_dict(self) -> dict:
        return {"benchmark_id": self.benchmark_id, "token_ids": self.token_ids,
                "role_spans": {r: [list(iv) for iv in ivs] for r, ivs in sorted(self.role_spans.items())}}


def _match_at(seq, pos, marker):
    return tuple(seq[pos : pos + len(marker)]) == marker


def parse_role_spans(token_ids: Sequence[int], rules: Sequence[RoleRule]):
    """Scan left to right for ``start ... end`` marker pairs, per rule.

    Returns ``(spans, warnings)`` where ``spans`` maps role id to half-open
    intervals strictly between the markers and ``warnings`` counts start markers
    that never close.
    """
    seq = [int(t) for t in token_ids]
    spans: dict[str, list[tuple[int, int]]] = {}
    warnings = 0
    for rule in rules:
        found = []
        pos = 0
        while pos < len(seq):
            if not _match_at(seq, pos, rule.start_marker):
                pos += 1
                continue
            inner = pos + len(rule.start_marker)
            close = next((q for q in range(inner, len(seq)) if _match_at(seq, q, rule.end_marker)), None)
            if close is None:
                warnings += 1
                pos = inner
                continue
            if close > inner:
                found.append((inner, close))
            pos = close + len(rule.end_marker)
        spans[rule.role_id] = found
    return spans, warnings


def read_calibration(path: str | os.PathLike, rules: Mapping[str, Sequence[RoleRule]] | None = None):
    """Load a JSON-lines calibration file.

    When ``rules`` (benchmark id -> rules) is given, spans for those benchmarks
    are re-derived from token ids and any spans stored in the file are ignored.
    """
    trajectories = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bench, tokens = rec["benchmark_id"], rec["token_ids"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad calibration record ({exc})") from None
            spans = rec.get("role_spans", {})
            if rules is not None and bench in rules:
                spans, _ = parse_role_spans(tokens, rules[bench])
            trajectories.append(CalibrationTrajectory(bench, tokens, spans))
    return trajectories


def write_calibration(trajectories: Iterable[CalibrationTrajectory], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class SaliencyMap:
    scores: np.ndarray  # (n_blocks, d_ff), float64
    model_id: str
    benchmark_id: str
    role_id: str | None
    trajectory_count: int

    def __post_init__(self):
        if self.trajectory_count < 1:
            raise ValidationError("SaliencyMap needs trajectory_count >= 1")
        if self.scores.ndim != 2 or not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValidationError("saliency scores must be a finite non-negative matrix")

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "benchmark_id": self.benchmark_id, "role_id": self.role_id,
                "trajectory_count": self.trajectory_count, "scores": self.scores.tolist()}


def _trajectory_saliency(model: ModelCheckpoint, traj: CalibrationTrajectory, positions) -> np.ndarray:
    _, trace = forward(model, traj.token_ids, capture=True)
    idx = np.asarray(positions, dtype=np.int64)
    return np.stack([np.abs(trace[layer][idx]).astype(np.float64).mean(axis=0)
                     for layer in range(len(trace))])


def _saliency(model, trajectories, position_fn, role_id, model_id, executor=None):
    trajectories = list(trajectories)
    if not trajectories:
        raise InputError("no calibration trajectories given")
    benches = sorted({t.benchmark_id for t in trajectories})
    if len(benches) != 1:
        raise InputError(f"trajectories span several benchmarks: {benches}")
    # Canonical order so the float reduction does not depend on input order.
    work = sorted(
        ((t, position_fn(t)) for t in trajectories),
        key=lambda item: (item[0].token_ids, sorted(item[0].role_spans.items())),
    )
    work = [(t, pos) for t, pos in work if pos]
    if not work:
        raise RoleCoverageError(f"no trajectory of {benches[0]!r} contains role {role_id!r}")
    if executor is None:
        partials = [_trajectory_saliency(model, t, pos) for t, pos in work]
    else:
        partials = list(executor.map(lambda item: _trajectory_saliency(model, *item), work))
    total = np.zeros_like(partials[0])
    for p in partials:
        total += p
    return SaliencyMap(total / len(partials), model_id, benches[0], role_id, len(partials))


def compute_saliency(model: ModelCheckpoint, trajectories: Sequence[CalibrationTrajectory], role_id: str,
                     model_id: str = "model", executor=None) -> SaliencyMap:
    """Mean |activation| over role positions, averaged over trajectories that contain the role."""
    return _saliency(model, trajectories, lambda t: t.positions(role_id), role_id, model_id, executor)


def compute_saliency_role_agnostic(model: ModelCheckpoint, trajectories: Sequence[CalibrationTrajectory],
                                   model_id: str = "model", executor=None) -> SaliencyMap:
    return _saliency(model, trajectories, lambda t: list(range(len(t.token_ids))), None, model_id, executor)


def topk_count(k: float, d_ff: int) -> int:
    if not 0.0 < k <= 1.0:
        raise ValidationError(f"k must lie in (0, 1], got {k}")
    # The epsilon keeps e.g. 0.07 * 100 = 7.000000000000001 from rounding up to 8.
    return min(d_ff, max(1, math.ceil(k * d_ff - 1e-9)))


def select_topk(sal: SaliencyMap, k: float) -> NeuronSet:
    scores = sal.scores
    count = topk_count(k, scores.shape[1])
    chosen = set()
    for layer, row in enumerate(scores):
        order = np.argsort(-row, kind="stable")
        chosen.update((layer, int(j)) for j in order[:count])
    return frozenset(chosen)


def overlap_rate(sets: Sequence[NeuronSet]) -> float:
    """Share of the union that belongs to at least two of the sets."""
    if len(sets) < 2:
        raise InputError("overlap_rate needs at least two sets")
    counts: dict = {}
    for s in sets:
        for n in s:
            counts[n] = counts.get(n, 0) + 1
    if not counts:
        return 0.0
    return sum(1 for c in counts.values() if c >= 2) / len(counts)


def neuron_set_to_json(neurons: NeuronSet) -> list:
    return [list(n) for n in sorted(neurons)]


def neuron_set_from_json(data) -> NeuronSet:
    return frozenset((int(a), int(b)) for a, b in data)
