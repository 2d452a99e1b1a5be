"""Backbone pool construction, AOS-based selection and conflict-aware transplantation."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (ArmError, ConfigError, IncompatibilityError, InputError, StageError,
                     TransplantConflictError, ValidationError)
from .merge_ops import MergeOperatorConfig, apply_operator, default_pool
from .role_tracing import (CalibrationTrajectory, NeuronSet, RoleRule, compute_saliency,
                           compute_saliency_role_agnostic, neuron_set_to_json, overlap_rate,
                           read_calibration, select_topk, target_role)
from .tensor_store import ModelCheckpoint, load_checkpoint, mlp_names, validate_pool

log = logging.getLogger(__name__)

REPORT_FORMAT = "armerge-report/1"
CONFLICT_POLICIES = ("error", "first_wins")


@dataclass
class DevScores:
    """Development-set scores used only to decide which benchmarks get repaired.

    ``backbone`` holds scores that apply whatever candidate is selected;
    ``by_operator`` holds per-candidate scores keyed by operator label.
    """

    experts: dict
    backbone: dict | None = None
    by_operator: dict | None = None

    def pairs_for(self, operator: str) -> dict[str, tuple[float, float]]:
        if self.by_operator is not None and operator in self.by_operator:
            source = self.by_operator[operator]
        elif self.backbone is not None:
            source = self.backbone
        else:
            raise InputError(f"dev scores have no entry for selected operator {operator!r}")
        missing = sorted(set(self.experts) - set(source))
        if missing:
            raise InputError(f"dev scores missing backbone score for {missing[0]!r}")
        return {b: (float(source[b]), float(self.experts[b])) for b in self.experts}

    def to_dict(self) -> dict:
        out = {"experts": self.experts}
        if self.backbone is not None:
            out["backbone"] = self.backbone
        if self.by_operator is not None:
            out["by_operator"] = self.by_operator
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "DevScores":
        if "experts" in data:
            unknown = set(data) - {"experts", "backbone", "by_operator"}
            if unknown:
                raise ConfigError(f"unknown dev score keys: {sorted(unknown)}")
            return cls(dict(data["experts"]), data.get("backbone"), data.get("by_operator"))
        # Flat form: {benchmark: [backbone_score, expert_score]}
        try:
            return cls({b: float(v[1]) for b, v in data.items()}, {b: float(v[0]) for b, v in data.items()})
        except (TypeError, IndexError, ValueError) as exc:
            raise ConfigError(f"bad dev score table: {exc}") from None


@dataclass
class MergePlan:
    experts: dict  # benchmark id -> checkpoint path (ordered; defines repair order)
    rules: dict  # benchmark id -> list[RoleRule]
    base_path: str | None = None
    calibration_path: str | None = None
    pool: list = field(default_factory=default_pool)
    k: float = 0.1
    dev_scores: DevScores | None = None
    weak_gap_threshold: float = 0.10
    seed: int = 0
    protect: bool = True
    transplant_conflict: str = "error"
    parse_spans: bool = False
    role_agnostic_overlap: bool = True
    record_timings: bool = False
    threads: int = 1

    def __post_init__(self):
        if len(self.experts) < 2:
            raise ValidationError("a merge plan needs at least two experts")
        if not 0.0 < self.k <= 1.0:
            raise ValidationError(f"k must lie in (0, 1], got {self.k}")
        if self.weak_gap_threshold < 0:
            raise ValidationError("weak_gap_threshold must be >= 0")
        if self.transplant_conflict not in CONFLICT_POLICIES:
            raise ValidationError(f"transplant_conflict must be one of {CONFLICT_POLICIES}")
        missing = [b for b in self.experts if b not in self.rules]
        if missing:
            raise ValidationError(f"no role rules for benchmark {missing[0]!r}")
        for b in self.experts:
            target_role(self.rules[b])
        labels = [cfg.label for cfg in self.pool]
        if not labels:
            raise ValidationError("operator pool is empty")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate operator labels in pool: {labels}")

    @property
    def benchmarks(self) -> list[str]:
        return list(self.experts)

    def targets(self) -> dict[str, str]:
        return {b: target_role(self.rules[b]) for b in self.experts}

    def settings(self) -> dict:
        return {
            "k": self.k, "weak_gap_threshold": self.weak_gap_threshold, "protect": self.protect,
            "transplant_conflict": self.transplant_conflict, "seed": self.seed,
            "pool": [cfg.to_dict() for cfg in self.pool],
        }

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: str | os.PathLike = ".") -> "MergePlan":
        base_dir = Path(base_dir)

        def resolve(p):
            return None if p is None else str((base_dir / p).resolve())

        allowed = {"base", "experts", "calibration", "pool", "k", "roles", "dev_scores",
                   "weak_gap_threshold", "seed", "protect", "transplant_conflict", "parse_spans",
                   "role_agnostic_overlap", "record_timings", "threads"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        for key in ("base", "experts", "calibration", "roles"):
            if key not in data:
                raise ConfigError(f"plan is missing required key {key!r}")
        seed = int(data.get("seed", 0))
        try:
            pool = [MergeOperatorConfig.from_dict({"seed": seed, **op}) for op in data["pool"]] \
                if "pool" in data else [
                    MergeOperatorConfig(c.operator, c.lam, c.density, c.drop_rate, seed) for c in default_pool()]
            rules = {b: [RoleRule.from_dict(r) for r in rs] for b, rs in data["roles"].items()}
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        dev = data.get("dev_scores")
        if isinstance(dev, str):
            dev_path = resolve(dev)
            try:
                with open(dev_path, encoding="utf-8") as fh:
                    dev = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{dev_path}: {exc}") from None
        try:
            return cls(
                experts={b: resolve(p) for b, p in data["experts"].items()},
                rules=rules,
                base_path=resolve(data["base"]),
                calibration_path=resolve(data["calibration"]),
                pool=pool,
                k=float(data.get("k", 0.1)),
                dev_scores=None if dev is None else DevScores.from_dict(dev),
                weak_gap_threshold=float(data.get("weak_gap_threshold", 0.10)),
                seed=seed,
                protect=bool(data.get("protect", True)),
                transplant_conflict=data.get("transplant_conflict", "error"),
                parse_spans=bool(data.get("parse_spans", False)),
                role_agnostic_overlap=bool(data.get("role_agnostic_overlap", True)),
                record_timings=bool(data.get("record_timings", False)),
                threads=int(data.get("threads", 1)),
            )
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class AOSReport:
    table: dict  # operator -> benchmark -> aos
    mean_aos: dict
    selected_operator: str

    def to_dict(self) -> dict:
        return {"table": self.table, "mean_aos": self.mean_aos, "selected_operator": self.selected_operator}


def compute_aos(candidate_set: NeuronSet, expert_set: NeuronSet) -> float:
    union = candidate_set | expert_set
    if not union:
        return 1.0
    return len(candidate_set & expert_set) / len(union)


def select_backbone(pool: Sequence[str], expert_saliency_sets: Mapping[str, NeuronSet],
                    candidate_saliency_sets: Mapping[str, Mapping[str, NeuronSet]]) -> AOSReport:
    """Score every candidate by mean AOS over benchmarks and pick the best.

    Ties go to the lexicographically smallest operator name. Means are compared
    as exact fractions so equal Jaccard averages never split on rounding.
    """
    if not pool:
        raise InputError("empty candidate pool")
    benchmarks = sorted(expert_saliency_sets)
    table, means, exact = {}, {}, {}
    for op in pool:
        cells = candidate_saliency_sets.get(op)
        if cells is None:
            raise InputError(f"no saliency sets for candidate {op!r}")
        row, total = {}, Fraction(0)
        for b in benchmarks:
            if b not in cells:
                raise InputError(f"missing AOS cell ({op!r}, {b!r})")
            row[b] = compute_aos(cells[b], expert_saliency_sets[b])
            union = len(cells[b] | expert_saliency_sets[b])
            total += Fraction(len(cells[b] & expert_saliency_sets[b]), union) if union else 1
        table[op] = row
        exact[op] = total / len(benchmarks) if benchmarks else Fraction(0)
        means[op] = float(exact[op])
    best = max(exact.values())
    selected = min(op for op in pool if exact[op] == best)
    return AOSReport(table, means, selected)


def diagnose_weak(dev_scores: Mapping[str, tuple[float, float]], threshold: float) -> set:
    """Benchmarks whose backbone trails the expert by more than ``threshold`` (relative)."""
    if threshold < 0:
        raise ValidationError("threshold must be >= 0")
    weak = set()
    for b, (backbone, expert) in dev_scores.items():
        if expert > 0 and expert - backbone > threshold * expert:
            weak.add(b)
    return weak


def protected_set(backbone_sets: Mapping[str, NeuronSet], b: str) -> NeuronSet:
    if b not in backbone_sets:
        raise InputError(f"unknown benchmark {b!r}")
    out = set()
    for other, neurons in backbone_sets.items():
        if other != b:
            out |= neurons
    return frozenset(out)


def transplant_set(donor_set: NeuronSet, protected: NeuronSet) -> NeuronSet:
    return frozenset(donor_set - protected)


def transplant_neurons(backbone: ModelCheckpoint, donor: ModelCheckpoint, neurons: NeuronSet) -> ModelCheckpoint:
    """Copy whole neurons (W_in row, b_in entry, W_out column, gate row) from donor."""
    validate_pool([backbone, donor])
    spec = backbone.spec
    for layer, j in neurons:
        if not (0 <= layer < spec.n_blocks and 0 <= j < spec.d_ff):
            raise InputError(f"neuron ({layer}, {j}) out of bounds for {spec.n_blocks} blocks x {spec.d_ff}")
    if not neurons:
        return backbone
    by_layer: dict[int, list[int]] = {}
    for layer, j in sorted(neurons):
        by_layer.setdefault(layer, []).append(j)
    updates = {}
    for layer, cols in by_layer.items():
        idx = np.asarray(cols)
        names = mlp_names(layer)
        for key in ("w_in", "b_in", "w_gate"):
            name = names[key]
            if name not in backbone.tensors:
                continue
            arr = backbone.tensors[name].copy()
            arr[idx] = donor.tensors[name][idx]
            updates[name] = arr
        arr = backbone.tensors[names["w_out"]].copy()
        arr[:, idx] = donor.tensors[names["w_out"]][:, idx]
        updates[names["w_out"]] = arr
    return backbone.replace(updates)


@dataclass
class ArmResult:
    final: ModelCheckpoint
    backbone: ModelCheckpoint
    candidates: dict
    aos: AOSReport
    report: dict


class _Stages:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def __call__(self, name):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (ArmError, OSError, ValueError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - start


def _split_by_benchmark(trajectories: Sequence[CalibrationTrajectory], benchmarks) -> dict:
    grouped = {b: [] for b in benchmarks}
    for t in trajectories:
        if t.benchmark_id in grouped:
            grouped[t.benchmark_id].append(t)
    empty = [b for b, ts in grouped.items() if not ts]
    if empty:
        raise InputError(f"calibration data has no trajectories for benchmark {empty[0]!r}")
    return grouped


def build_backbone_pool(plan: MergePlan, base: ModelCheckpoint, experts: Mapping[str, ModelCheckpoint],
                        executor=None) -> dict[str, ModelCheckpoint]:
    validate_pool([base, *experts.values()])
    expert_list = [experts[b] for b in plan.benchmarks]

    def build(cfg):
        try:
            return apply_operator(cfg, base, expert_list)
        except IncompatibilityError:
            raise
        except ArmError as exc:
            raise StageError(f"operator {cfg.label}", exc) from exc

    if executor is None:
        built = [build(cfg) for cfg in plan.pool]
    else:
        built = list(executor.map(build, plan.pool))
    return {cfg.label: ckpt for cfg, ckpt in zip(plan.pool, built)}


def _salient_sets(model, grouped, targets, k, model_id, executor):
    return {b: select_topk(compute_saliency(model, grouped[b], targets[b], model_id, executor), k)
            for b in grouped}


def score_candidates(plan: MergePlan, base, experts, trajectories, stages=None, executor=None):
    """Stages up to backbone selection. Returns (candidates, donor_sets, candidate_sets, AOSReport)."""
    stages = stages or _Stages()
    targets = plan.targets()
    with stages("donor_saliency"):
        grouped = _split_by_benchmark(trajectories, plan.benchmarks)
        donor_sets = {b: select_topk(compute_saliency(experts[b], grouped[b], targets[b], f"expert:{b}", executor),
                                     plan.k)
                      for b in plan.benchmarks}
    with stages("candidates"):
        candidates = build_backbone_pool(plan, base, experts, executor)
    with stages("candidate_saliency"):
        candidate_sets = {op: _salient_sets(m, grouped, targets, plan.k, f"candidate:{op}", executor)
                          for op, m in candidates.items()}
    with stages("aos"):
        aos = select_backbone(list(candidates), donor_sets, candidate_sets)
    return candidates, donor_sets, candidate_sets, aos, grouped


def _layer_fractions(neurons, n_blocks, d_ff):
    counts = [0] * n_blocks
    for layer, _ in neurons:
        counts[layer] += 1
    return [c / d_ff for c in counts]


def run_arm_models(plan: MergePlan, base: ModelCheckpoint, experts: Mapping[str, ModelCheckpoint],
                   trajectories: Sequence[CalibrationTrajectory]) -> ArmResult:
    """Full pipeline on in-memory models; ``run_arm`` wraps this with file loading."""
    stages = _Stages()
    missing = [b for b in plan.benchmarks if b not in experts]
    if missing:
        raise InputError(f"no expert checkpoint for benchmark {missing[0]!r}")
    executor = ThreadPoolExecutor(plan.threads) if plan.threads > 1 else None
    try:
        with stages("validate"):
            spec = validate_pool([base, *(experts[b] for b in plan.benchmarks)])
        candidates, donor_sets, candidate_sets, aos, grouped = score_candidates(
            plan, base, experts, trajectories, stages, executor)
        targets = plan.targets()
        selected = aos.selected_operator
        backbone = candidates[selected]
        backbone_sets = candidate_sets[selected]

        with stages("weak_benchmarks"):
            if plan.dev_scores is not None:
                dev_pairs = plan.dev_scores.pairs_for(selected)
                dev_pairs = {b: dev_pairs[b] for b in plan.benchmarks}
                weak = diagnose_weak(dev_pairs, plan.weak_gap_threshold)
            else:
                dev_pairs = None
                weak = set(plan.benchmarks) if plan.weak_gap_threshold == 0 else set()
            weak_order = [b for b in plan.benchmarks if b in weak]

        with stages("transplant"):
            plans, claimed, set_stats = {}, {}, {}
            for b in weak_order:
                protected = protected_set(backbone_sets, b) if plan.protect else frozenset()
                chosen = transplant_set(donor_sets[b], protected)
                clash = {n: claimed[n] for n in chosen if n in claimed}
                if clash:
                    if plan.transplant_conflict == "error":
                        n, other = sorted(clash.items())[0]
                        raise TransplantConflictError(
                            f"transplant sets of {other!r} and {b!r} share {len(clash)} neuron(s), e.g. {n}")
                    chosen = frozenset(chosen - set(clash))
                for n in chosen:
                    claimed[n] = b
                plans[b] = chosen
                set_stats[b] = {
                    "protected": len(protected),
                    "transplant": len(chosen),
                    "conflict_removed": len(donor_sets[b] & protected),
                    "donor_conflict_removed": len(clash),
                }
            final = backbone
            for b in weak_order:
                final = transplant_neurons(final, experts[b], plans[b])

        overlap = {"role_conditioned": overlap_rate([donor_sets[b] for b in plan.benchmarks])}
        if plan.role_agnostic_overlap:
            with stages("role_agnostic_overlap"):
                agnostic = [select_topk(compute_saliency_role_agnostic(experts[b], grouped[b], f"expert:{b}",
                                                                       executor), plan.k)
                            for b in plan.benchmarks]
                overlap["role_agnostic"] = overlap_rate(agnostic)
    finally:
        if executor is not None:
            executor.shutdown()

    sets = {}
    for b in plan.benchmarks:
        entry = {"donor": len(donor_sets[b]), "backbone": len(backbone_sets[b]), "weak": b in weak}
        entry.update(set_stats.get(b, {"protected": 0, "transplant": 0, "conflict_removed": 0,
                                       "donor_conflict_removed": 0}))
        sets[b] = entry
    all_transplanted = frozenset().union(*plans.values()) if plans else frozenset()
    report = {
        "format": REPORT_FORMAT,
        "benchmarks": plan.benchmarks,
        "target_roles": targets,
        "settings": plan.settings(),
        "stages": [s for s in stages.timings],
        "aos": aos.to_dict(),
        "dev_scores": None if dev_pairs is None else {b: list(v) for b, v in dev_pairs.items()},
        "weak_benchmarks": weak_order,
        "sets": sets,
        "transplanted_total": len(all_transplanted),
        "transplanted_fraction_per_layer": _layer_fractions(all_transplanted, spec.n_blocks, spec.d_ff),
        "transplanted_fraction_per_layer_by_benchmark": {
            b: _layer_fractions(plans[b], spec.n_blocks, spec.d_ff) for b in weak_order},
        "overlap": overlap,
        "neurons": {
            b: {"donor": neuron_set_to_json(donor_sets[b]), "backbone": neuron_set_to_json(backbone_sets[b]),
                "transplant": neuron_set_to_json(plans.get(b, frozenset()))}
            for b in plan.benchmarks
        },
    }
    if plan.record_timings:
        report["timings_s"] = stages.timings
    log.info("selected %s (mean AOS %.3f); weak=%s; transplanted %d neurons",
             selected, aos.mean_aos[selected], weak_order, len(all_transplanted))
    return ArmResult(final, backbone, candidates, aos, report)


def load_inputs(plan: MergePlan):
    """Load base, experts and calibration trajectories named by a plan."""
    if plan.base_path is None or plan.calibration_path is None:
        raise ConfigError("plan needs base and calibration paths to load inputs")
    base = load_checkpoint(plan.base_path)
    experts = {b: load_checkpoint(p) for b, p in plan.experts.items()}
    rules = plan.rules if plan.parse_spans else None
    trajectories = read_calibration(plan.calibration_path, rules)
    return base, experts, trajectories


def run_arm(plan: MergePlan) -> tuple[ModelCheckpoint, dict]:
    base, experts, trajectories = load_inputs(plan)
    result = run_arm_models(plan, base, experts, trajectories)
    return result.final, result.report


def write_report(report: Mapping, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
