"""Synthetic base/expert checkpoints with planted role circuits, and their evaluation.

Each synthetic benchmark owns a block of ``class_size`` answer tokens. A sample
looks like::

    filler  <think> filler </think>  filler  <call_b> permutation of class tokens </call_b>  filler

At every position inside the ``call`` span the model should predict
``rule(token)``, where ``shift:o`` maps the i-th class token to the
``(i + o) mod class_size``-th one. Prediction is the argmax over the class tokens
only (ties resolve to the lowest token id), so a model with constant logits
scores exactly ``1 / class_size``.

An expert is the base with a handful of MLP neurons rewritten into a lookup
table: neuron ``j`` keys on the MLP input seen at one class token and writes the
readout direction of that token's target into the residual stream.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .arm_pipeline import DevScores
from .errors import ForgeError, ValidationError
from .merge_ops import MergeOperatorConfig, apply_operator, default_pool
from .role_tracing import CalibrationTrajectory, RoleRule, neuron_set_from_json, neuron_set_to_json
from .tensor_store import ArchitectureSpec, ModelCheckpoint, canonical_layout, mlp_names
from .toy_transformer import forward

log = logging.getLogger(__name__)

INIT_BOUND = 0.05
ACCURACY_BAR = 0.9
SCALE_CAP = 2 ** 10
KEY_PREACT = 4.0
NEGATIVES_PER_BENCHMARK = 16
WRITE_UNIT = INIT_BOUND
FILLER_ZIPF = 1.0
TARGET_ROLE = "call"
AUX_ROLE = "think"

_STREAMS = {"forge_fit": 1, "forge_check": 2, "calibration": 3, "dev": 4, "test": 5}


def stream_seed(seed: int, stream: str, bench_id: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _STREAMS.get(stream, 0), zlib.crc32(bench_id.encode()), index])


def parse_rule(rule: str) -> int:
    kind, _, arg = rule.partition(":")
    if kind != "shift" or not arg.lstrip("-").isdigit():
        raise ValidationError(f"unsupported mapping rule {rule!r}; expected 'shift:<int>'")
    return int(arg)


@dataclass(frozen=True)
class BenchmarkSpec:
    benchmark_id: str
    planted: frozenset
    start_marker: tuple
    end_marker: tuple
    class_start: int
    class_size: int
    mapping_rule: str
    filler: tuple  # [lo, hi) token range shared by all benchmarks
    think_markers: tuple  # (start_token, end_token)
    headroom: float = 1.0
    read_gain: float = 1.0  # multiplies KEY_PREACT for this benchmark's neurons

    def __post_init__(self):
        object.__setattr__(self, "planted", frozenset((int(a), int(b)) for a, b in self.planted))
        object.__setattr__(self, "start_marker", tuple(int(t) for t in self.start_marker))
        object.__setattr__(self, "end_marker", tuple(int(t) for t in self.end_marker))
        object.__setattr__(self, "filler", tuple(int(t) for t in self.filler))
        object.__setattr__(self, "think_markers", tuple(int(t) for t in self.think_markers))
        parse_rule(self.mapping_rule)
        if self.class_size < 2:
            raise ValidationError("class_size must be >= 2")
        if self.filler[1] <= self.filler[0]:
            raise ValidationError("filler range is empty")
        if self.headroom <= 0 or self.read_gain <= 0:
            raise ValidationError("headroom and read_gain must be positive")

    @property
    def class_tokens(self) -> np.ndarray:
        return np.arange(self.class_start, self.class_start + self.class_size)

    def rule(self, token: int) -> int:
        offset = parse_rule(self.mapping_rule)
        return self.class_start + (token - self.class_start + offset) % self.class_size

    def role_rules(self) -> list[RoleRule]:
        return [
            RoleRule(TARGET_ROLE, self.start_marker, self.end_marker, target=True),
            RoleRule(AUX_ROLE, self.think_markers[:1], self.think_markers[1:]),
        ]

    def to_dict(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id, "planted": neuron_set_to_json(self.planted),
            "start_marker": list(self.start_marker), "end_marker": list(self.end_marker),
            "class_start": self.class_start, "class_size": self.class_size,
            "mapping_rule": self.mapping_rule, "filler": list(self.filler),
            "think_markers": list(self.think_markers), "headroom": self.headroom,
            "read_gain": self.read_gain,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BenchmarkSpec":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown benchmark keys: {sorted(unknown)}")
        data["planted"] = neuron_set_from_json(data.get("planted", []))
        return cls(**data)


@dataclass(frozen=True)
class ForgeScenario:
    spec: ArchitectureSpec
    benchmarks: tuple
    overlap_mode: str = "disjoint"
    seed: int = 0
    calibration_per_benchmark: int = 16
    dev_samples: int = 64
    pool: tuple = field(default_factory=lambda: tuple(default_pool()))

    def __post_init__(self):
        object.__setattr__(self, "benchmarks", tuple(self.benchmarks))
        object.__setattr__(self, "pool", tuple(self.pool))
        if self.overlap_mode not in ("disjoint", "overlapping"):
            raise ValidationError(f"overlap_mode must be 'disjoint' or 'overlapping', got {self.overlap_mode!r}")
        ids = [b.benchmark_id for b in self.benchmarks]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate benchmark ids: {ids}")
        for b in self.benchmarks:
            for layer, j in b.planted:
                if not (0 <= layer < self.spec.n_blocks and 0 <= j < self.spec.d_ff):
                    raise ValidationError(f"{b.benchmark_id}: planted neuron ({layer}, {j}) out of bounds")
            top = max(b.class_start + b.class_size, b.filler[1], *b.start_marker, *b.end_marker,
                      *b.think_markers)
            if top > self.spec.vocab_size:
                raise ValidationError(f"{b.benchmark_id}: token layout exceeds vocab_size {self.spec.vocab_size}")
        if self.overlap_mode == "disjoint":
            seen = set()
            for b in self.benchmarks:
                if seen & b.planted:
                    raise ValidationError(f"planted sets overlap in disjoint mode ({b.benchmark_id})")
                seen |= b.planted

    def benchmark(self, benchmark_id: str) -> BenchmarkSpec:
        for b in self.benchmarks:
            if b.benchmark_id == benchmark_id:
                return b
        raise KeyError(benchmark_id)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(), "benchmarks": [b.to_dict() for b in self.benchmarks],
            "overlap_mode": self.overlap_mode, "seed": self.seed,
            "calibration_per_benchmark": self.calibration_per_benchmark, "dev_samples": self.dev_samples,
            "pool": [c.to_dict() for c in self.pool],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ForgeScenario":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["spec"] = ArchitectureSpec.from_dict(data["spec"])
        kwargs["benchmarks"] = [BenchmarkSpec.from_dict(b) for b in data["benchmarks"]]
        if "pool" in data:
            kwargs["pool"] = [MergeOperatorConfig.from_dict(c) for c in data["pool"]]
        return cls(**kwargs)


def load_scenario(path: str | os.PathLike) -> ForgeScenario:
    with open(path, encoding="utf-8") as fh:
        return ForgeScenario.from_dict(json.load(fh))


def save_scenario(scenario: ForgeScenario, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_scenario(spec: ArchitectureSpec, n_benchmarks: int = 3, planted_per_block: int = 8,
                  overlap_mode: str = "disjoint", shared_per_block: int = 2, class_size: int | None = None,
                  seed: int = 0, headroom: Sequence[float] | None = None,
                  read_gain: Sequence[float] | None = None, **kwargs) -> ForgeScenario:
    """Lay out tokens and planted neurons for ``n_benchmarks`` synthetic benchmarks.

    Tokens: class blocks first, then per-benchmark call markers, two think
    markers, and the remaining ids as shared filler. Planted neurons are drawn
    from a seeded per-block permutation; in overlapping mode consecutive
    benchmarks share ``shared_per_block`` neurons in every block. The default
    class size gives every class token exactly one planted neuron.
    ``headroom`` and ``read_gain`` are per-benchmark circuit strengths.
    """
    n = n_benchmarks
    if class_size is None:
        class_size = planted_per_block * spec.n_blocks
    markers_start = n * class_size
    think = (markers_start + 2 * n, markers_start + 2 * n + 1)
    filler = (think[1] + 1, spec.vocab_size)
    if filler[1] - filler[0] < 4:
        raise ValidationError(f"vocab_size {spec.vocab_size} too small for {n} benchmarks of {class_size} tokens")
    stride = planted_per_block if overlap_mode == "disjoint" else planted_per_block - shared_per_block
    if stride <= 0 or stride * (n - 1) + planted_per_block > spec.d_ff:
        raise ValidationError("planted neurons do not fit in d_ff")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    perms = [rng.permutation(spec.d_ff) for _ in range(spec.n_blocks)]
    headroom = list(headroom) if headroom is not None else [1.0] * n
    read_gain = list(read_gain) if read_gain is not None else [1.0] * n
    benches = []
    for b in range(n):
        planted = {(layer, int(j)) for layer in range(spec.n_blocks)
                   for j in perms[layer][b * stride : b * stride + planted_per_block]}
        offset = 1 + b % (class_size - 1)
        benches.append(BenchmarkSpec(
            benchmark_id=f"bench{b}", planted=frozenset(planted),
            start_marker=(markers_start + 2 * b,), end_marker=(markers_start + 2 * b + 1,),
            class_start=b * class_size, class_size=class_size, mapping_rule=f"shift:{offset}",
            filler=filler, think_markers=think, headroom=float(headroom[b]),
            read_gain=float(read_gain[b]),
        ))
    return ForgeScenario(spec, benches, overlap_mode, seed, **kwargs)


def filler_probs(bench: BenchmarkSpec) -> np.ndarray:
    """Zipf-like frequencies over the shared filler range (rank 1 = lowest id)."""
    lo, hi = bench.filler
    weights = 1.0 / np.arange(1, hi - lo + 1) ** FILLER_ZIPF
    return weights / weights.sum()


def generate_example(bench: BenchmarkSpec, rng: np.random.Generator) -> CalibrationTrajectory:
    lo, hi = bench.filler
    probs = filler_probs(bench)

    def filler(a, b):
        n = int(rng.integers(a, b + 1))
        return [int(t) for t in lo + rng.choice(hi - lo, size=n, p=probs)]

    toks = filler(4, 24)
    think_start = len(toks) + 1
    toks += [bench.think_markers[0], *filler(4, 16), bench.think_markers[1]]
    think_span = (think_start, len(toks) - 1)
    toks += filler(1, 8)
    toks += list(bench.start_marker)
    call_start = len(toks)
    toks += [int(t) for t in rng.permutation(bench.class_tokens)]
    call_span = (call_start, len(toks))
    toks += list(bench.end_marker)
    toks += filler(1, 6)
    return CalibrationTrajectory(bench.benchmark_id, toks, {TARGET_ROLE: [call_span], AUX_ROLE: [think_span]})


def generate_examples(bench: BenchmarkSpec, n: int, seed: int, stream: str) -> list[CalibrationTrajectory]:
    return [generate_example(bench, np.random.default_rng(stream_seed(seed, stream, bench.benchmark_id, i)))
            for i in range(n)]


def _score(model: ModelCheckpoint, bench: BenchmarkSpec, examples) -> float:
    cls = bench.class_tokens
    correct = total = 0
    for ex in examples:
        logits, _ = forward(model, ex.token_ids)
        for t in ex.positions(TARGET_ROLE):
            pred = int(cls[int(np.argmax(logits[t, cls]))])
            correct += pred == bench.rule(ex.token_ids[t])
            total += 1
    return correct / total


def eval_synthetic(model: ModelCheckpoint, bench: BenchmarkSpec, n_samples: int, seed: int,
                   stream: str = "test") -> float:
    """Fraction of call-span positions where the class-restricted argmax equals the rule."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    return _score(model, bench, generate_examples(bench, n_samples, seed, stream))


def forge_base(spec: ArchitectureSpec, seed: int) -> ModelCheckpoint:
    """Uniform(-0.05, 0.05) weights; RMSNorm gains start at 1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    tensors = {}
    for name, shape in canonical_layout(spec).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.uniform(-INIT_BOUND, INIT_BOUND, size=shape).astype(np.float32)
    return ModelCheckpoint(spec, tensors)


def _assignment(bench: BenchmarkSpec) -> list[tuple[tuple[int, int], int]]:
    """Planted neuron -> class token it keys on, round-robin in sorted neuron order."""
    return [(n, int(bench.class_tokens[i % bench.class_size])) for i, n in enumerate(sorted(bench.planted))]


def _readouts(base: ModelCheckpoint, bench: BenchmarkSpec, avoid=()) -> dict[int, np.ndarray]:
    """Unit residual directions whose class logits are a centred one-hot on each target.

    Logits of the ``avoid`` tokens (other benchmarks' classes) are held at zero
    in the least-squares sense, so circuits sharing a model do not leak into
    each other's answers.
    """
    avoid = sorted(set(int(t) for t in avoid) - set(int(t) for t in bench.class_tokens))
    rows = np.concatenate([bench.class_tokens, np.asarray(avoid, dtype=np.int64)])
    head = base.tensors["lm_head"][rows].astype(np.float64)
    pinv = np.linalg.pinv(head)
    out = {}
    for i, tok in enumerate(bench.class_tokens):
        target = np.zeros(len(rows))
        target[: bench.class_size] = -1.0 / bench.class_size
        target[i] += 1.0
        r = pinv @ target
        out[int(tok)] = r / np.linalg.norm(r)
    return out


def _plant(base: ModelCheckpoint, bench: BenchmarkSpec, fit, scale: float, avoid=(),
           negatives=()) -> ModelCheckpoint:
    """Write the lookup circuit into the planted neurons, block by block.

    Keys and thresholds are fitted on the MLP inputs of the partially edited
    model, so later blocks see the outputs of earlier planted neurons. The read
    side always drives matched neurons to a pre-activation of about
    ``KEY_PREACT``; ``scale`` only sets the size of what they write.
    ``negatives`` are extra trajectories every planted neuron must stay off on.
    """
    spec = base.spec
    tensors = base.mutable_copy()
    readout = _readouts(base, bench, avoid)
    assignment = _assignment(bench)
    share = {}
    for _, tok in assignment:
        share[tok] = share.get(tok, 0) + 1
    write = scale * WRITE_UNIT * np.sqrt(spec.d_model)
    current = base
    for layer in range(spec.n_blocks):
        here = [(j, tok) for (lyr, j), tok in assignment if lyr == layer]
        if not here:
            continue
        names = mlp_names(layer)
        inputs, tokens, in_role = [], [], []
        for ex in [*fit, *negatives]:
            _, trace = forward(current, ex.token_ids, capture_inputs=True)
            inputs.append(trace.mlp_inputs[layer].astype(np.float64))
            tokens.extend(ex.token_ids)
            mask = np.zeros(len(ex.token_ids), dtype=bool)
            if ex.benchmark_id == bench.benchmark_id:
                mask[ex.positions(TARGET_ROLE)] = True
            in_role.append(mask)
        inputs = np.concatenate(inputs)
        tokens = np.asarray(tokens)
        in_role = np.concatenate(in_role)
        for j, tok in here:
            hit = in_role & (tokens == tok)
            key = inputs[hit].mean(axis=0)
            key /= np.linalg.norm(key)
            proj = inputs @ key
            lo, hi = proj[hit].min(), proj[~hit].max()
            if lo <= hi:
                lo, hi = proj[hit].mean(), proj[~hit].mean()
            tau, margin = 0.5 * (lo + hi), 0.5 * (lo - hi)
            gain = KEY_PREACT * bench.read_gain / margin
            if spec.mlp_kind == "gated":
                # No gate bias: silu(g x) * x / margin is ~0 for x < 0 and quadratic for small x > 0.
                tensors[names["w_gate"]][j] = gain * key
                tensors[names["w_in"]][j] = key / margin
                tensors[names["b_in"]][j] = 0.0
                x = proj[hit] * gain
                z_hit = (x / (1.0 + np.exp(-x))) * proj[hit] / margin
            else:
                tensors[names["w_in"]][j] = gain * key
                tensors[names["b_in"]][j] = -gain * tau
                x = gain * (proj[hit] - tau)
                z_hit = 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))
            tensors[names["w_out"]][:, j] = write * readout[bench.rule(tok)] / (z_hit.mean() * share[tok])
        current = ModelCheckpoint(spec, tensors)
    return current


def forge_expert(base: ModelCheckpoint, bench: BenchmarkSpec, seed: int, n_fit: int = 32,
                 n_check: int = 64, avoid=(), negatives=()) -> ModelCheckpoint:
    """Rewrite ``bench.planted`` neurons of ``base`` until the benchmark is solved.

    The amplification scale doubles from 1 until accuracy on a seeded check set
    reaches 0.9, then is multiplied by ``bench.headroom``. ``avoid`` lists token
    ids whose logits the planted circuit should not move and ``negatives`` are
    trajectories from other benchmarks the planted neurons must ignore.
    """
    if not bench.planted:
        return base
    for layer, j in bench.planted:
        if not (0 <= layer < base.spec.n_blocks and 0 <= j < base.spec.d_ff):
            raise ValidationError(f"planted neuron ({layer}, {j}) out of bounds")
    fit = generate_examples(bench, n_fit, seed, "forge_fit")
    check = generate_examples(bench, n_check, seed, "forge_check")
    scale = 1.0
    while scale <= SCALE_CAP:
        expert = _plant(base, bench, fit, scale, avoid, negatives)
        acc = _score(expert, bench, check)
        if acc >= ACCURACY_BAR:
            log.debug("%s: accuracy %.3f at scale %g", bench.benchmark_id, acc, scale)
            if bench.headroom != 1.0:
                expert = _plant(base, bench, fit, scale * bench.headroom, avoid, negatives)
            return expert
        scale *= 2
    raise ForgeError(f"{bench.benchmark_id}: accuracy bar {ACCURACY_BAR} not reached at scale cap {SCALE_CAP}")


@dataclass
class ForgedSet:
    scenario: ForgeScenario
    base: ModelCheckpoint
    experts: dict
    calibration: list

    @property
    def rules(self) -> dict:
        return {b.benchmark_id: b.role_rules() for b in self.scenario.benchmarks}


def forge_scenario(scenario: ForgeScenario) -> ForgedSet:
    base = forge_base(scenario.spec, scenario.seed)
    every_class = [int(t) for b in scenario.benchmarks for t in b.class_tokens]
    fits = {b.benchmark_id: generate_examples(b, NEGATIVES_PER_BENCHMARK, scenario.seed, "forge_fit")
            for b in scenario.benchmarks}
    experts = {}
    for b in scenario.benchmarks:
        negatives = [ex for other, exs in fits.items() if other != b.benchmark_id for ex in exs]
        experts[b.benchmark_id] = forge_expert(base, b, scenario.seed, avoid=every_class, negatives=negatives)
    calibration = [ex for b in scenario.benchmarks
                   for ex in generate_examples(b, scenario.calibration_per_benchmark, scenario.seed, "calibration")]
    return ForgedSet(scenario, base, experts, calibration)


def compute_dev_scores(forged: ForgedSet, pool: Sequence[MergeOperatorConfig] | None = None,
                       n_samples: int | None = None) -> DevScores:
    """Dev-split scores of every expert and every pool candidate on every benchmark."""
    sc = forged.scenario
    pool = list(sc.pool if pool is None else pool)
    n = sc.dev_samples if n_samples is None else n_samples
    order = [b.benchmark_id for b in sc.benchmarks]
    expert_list = [forged.experts[b] for b in order]
    experts = {b.benchmark_id: eval_synthetic(forged.experts[b.benchmark_id], b, n, sc.seed, "dev")
               for b in sc.benchmarks}
    by_op = {}
    for cfg in pool:
        cand = apply_operator(cfg, forged.base, expert_list)
        by_op[cfg.label] = {b.benchmark_id: eval_synthetic(cand, b, n, sc.seed, "dev") for b in sc.benchmarks}
    return DevScores(experts, by_operator=by_op)


def evaluate_all(model: ModelCheckpoint, scenario: ForgeScenario, n_samples: int, seed: int | None = None,
                 stream: str = "test") -> dict[str, float]:
    seed = scenario.seed if seed is None else seed
    return {b.benchmark_id: eval_synthetic(model, b, n_samples, seed, stream) for b in scenario.benchmarks}
