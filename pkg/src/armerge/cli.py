"""``armerge`` command line: merge, trace, select, run, forge and report.

Run configs are JSON documents::

    {
      "plan":    {... MergePlan keys, paths relative to this file ...},
      "outputs": {"dir": "out", "model": "final.armf", "report": "report.json"},
      "eval":    {"scenario": "scenario.json", "n_samples": 128},
      "sweep":   {"k": [0.05, 0.1, 0.2, 0.4], "protect": [true, false]}
    }

Only ``plan`` is required. ``ARMERGE_OUT_DIR`` replaces ``outputs.dir``; no
other setting can come from the environment. Failures print one JSON line on
stderr and exit with 2 (config), 3 (I/O), 4 (validation) or 5 (stage).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

from .arm_pipeline import (MergePlan, load_inputs, run_arm_models, score_candidates, write_report)
from .errors import ArmError, ConfigError, StageError
from .expert_forge import (ForgeScenario, compute_dev_scores, evaluate_all, forge_scenario, load_scenario,
                           make_scenario, save_scenario)
from .merge_ops import MergeOperatorConfig, apply_operator
from .role_tracing import (compute_saliency, compute_saliency_role_agnostic, neuron_set_to_json,
                           read_calibration, select_topk, write_calibration)
from .tensor_store import ArchitectureSpec, load_checkpoint, save_checkpoint

log = logging.getLogger("armerge")

OUT_DIR_ENV = "ARMERGE_OUT_DIR"
CONFIG_SECTIONS = {"plan", "outputs", "eval", "sweep"}
OUTPUT_KEYS = {"dir", "model", "report"}
EVAL_KEYS = {"scenario", "n_samples", "seed"}
SWEEP_KEYS = {"k", "protect"}
REPORT_TABLES = ("aos", "overlap", "sweep")
PLAN_OVERRIDE_KEYS = {"pool", "k", "weak_gap_threshold", "seed", "protect", "transplant_conflict", "parse_spans",
                      "role_agnostic_overlap", "record_timings", "threads"}


@dataclasses.dataclass
class RunConfig:
    plan: MergePlan
    out_dir: Path
    model_name: str = "final.armf"
    report_name: str = "report.json"
    eval_scenario: str | None = None
    eval_samples: int = 128
    eval_seed: int | None = None
    sweep_k: list = dataclasses.field(default_factory=list)
    sweep_protect: list = dataclasses.field(default_factory=lambda: [True, False])

    @property
    def model_path(self) -> Path:
        return self.out_dir / self.model_name

    @property
    def report_path(self) -> Path:
        return self.out_dir / self.report_name


def _reject_unknown(section: str, data, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_run_config(path: str | os.PathLike, env=None) -> RunConfig:
    """Parse a run config; every path is resolved against the config's directory."""
    env = os.environ if env is None else env
    path = Path(path)
    data = _read_json(path)
    _reject_unknown("config", data, CONFIG_SECTIONS)
    if "plan" not in data:
        raise ConfigError("config has no 'plan' section")
    here = path.resolve().parent
    plan = MergePlan.from_dict(data["plan"], here)
    outputs = data.get("outputs", {})
    _reject_unknown("outputs", outputs, OUTPUT_KEYS)
    out_dir = env.get(OUT_DIR_ENV) or outputs.get("dir", ".")
    cfg = RunConfig(plan, (here / out_dir).resolve(),
                    outputs.get("model", "final.armf"), outputs.get("report", "report.json"))
    if "eval" in data:
        ev = data["eval"]
        _reject_unknown("eval", ev, EVAL_KEYS)
        if "scenario" not in ev:
            raise ConfigError("eval section needs 'scenario'")
        cfg.eval_scenario = str((here / ev["scenario"]).resolve())
        cfg.eval_samples = int(ev.get("n_samples", 128))
        cfg.eval_seed = ev.get("seed")
    if "sweep" in data:
        sw = data["sweep"]
        _reject_unknown("sweep", sw, SWEEP_KEYS)
        if cfg.eval_scenario is None:
            raise ConfigError("a sweep needs an eval section to score its runs")
        cfg.sweep_k = [float(k) for k in sw.get("k", [])]
        cfg.sweep_protect = [bool(p) for p in sw.get("protect", [True, False])]
    return cfg


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _with_threads(plan: MergePlan, threads: int | None) -> MergePlan:
    return plan if threads is None else dataclasses.replace(plan, threads=threads)


# -- commands ---------------------------------------------------------------

def cmd_merge(args) -> int:
    cfg = MergeOperatorConfig(args.op, lam=args.lam, density=args.density, drop_rate=args.drop_rate,
                              seed=args.seed)
    if args.op != "average" and args.base is None:
        raise ConfigError(f"--base is required for operator {args.op!r}")
    base = load_checkpoint(args.base) if args.base else None
    experts = [load_checkpoint(p) for p in args.expert]
    merged = apply_operator(cfg, base, experts)
    save_checkpoint(merged, args.out)
    return 0


def cmd_trace(args) -> int:
    model = load_checkpoint(args.model)
    trajs = [t for t in read_calibration(args.calib) if t.benchmark_id == args.benchmark]
    if args.role_agnostic:
        sal = compute_saliency_role_agnostic(model, trajs, model_id=str(args.model))
    else:
        if args.role is None:
            raise ConfigError("--role is required unless --role-agnostic is given")
        sal = compute_saliency(model, trajs, args.role, model_id=str(args.model))
    out = {"saliency": sal.to_dict(), "k": args.k, "neurons": neuron_set_to_json(select_topk(sal, args.k))}
    _write_json(out, args.out)
    return 0


def cmd_select(args) -> int:
    cfg = load_run_config(args.config)
    plan = _with_threads(cfg.plan, args.threads)
    base, experts, trajectories = load_inputs(plan)
    _, donor_sets, candidate_sets, aos, _ = score_candidates(plan, base, experts, trajectories)
    out = {
        **aos.to_dict(),
        "k": plan.k,
        "donor_sets": {b: neuron_set_to_json(s) for b, s in donor_sets.items()},
        "candidate_sets": {op: {b: neuron_set_to_json(s) for b, s in sets.items()}
                           for op, sets in candidate_sets.items()},
    }
    _write_json(out, args.out or cfg.out_dir / "aos.json")
    return 0


def _scored(report: dict, scores: dict) -> float | None:
    non_weak = [b for b in report["benchmarks"] if b not in report["weak_benchmarks"]]
    return min(scores[b] for b in non_weak) if non_weak else None


def execute_run(cfg: RunConfig):
    """Run the pipeline (and optional eval/sweep) for a parsed config; returns ``(final, report)``."""
    plan = cfg.plan
    base, experts, trajectories = load_inputs(plan)
    result = run_arm_models(plan, base, experts, trajectories)
    report = dict(result.report)
    if cfg.eval_scenario is not None:
        scenario = load_scenario(cfg.eval_scenario)

        def score(model):
            return evaluate_all(model, scenario, cfg.eval_samples, cfg.eval_seed)

        report["eval"] = {
            "n_samples": cfg.eval_samples,
            "experts": {b: score(m)[b] for b, m in experts.items()},
            "backbone": score(result.backbone),
            "final": score(result.final),
            "candidates": {op: score(m) for op, m in result.candidates.items()},
        }
        sweep = []
        for k in cfg.sweep_k:
            for protect in cfg.sweep_protect:
                variant = dataclasses.replace(plan, k=k, protect=protect, role_agnostic_overlap=False)
                res = run_arm_models(variant, base, experts, trajectories)
                scores = score(res.final)
                sweep.append({
                    "k": k, "protect": protect, "selected_operator": res.aos.selected_operator,
                    "weak_benchmarks": res.report["weak_benchmarks"], "scores": scores,
                    "min_non_weak": _scored(res.report, scores),
                    "transplanted_total": res.report["transplanted_total"],
                })
        if sweep:
            report["sweep"] = sweep
    return result.final, report


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    cfg.plan = _with_threads(cfg.plan, args.threads)
    final, report = execute_run(cfg)
    model_path = Path(args.out_model) if args.out_model else cfg.model_path
    report_path = Path(args.out_report) if args.out_report else cfg.report_path
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(final, model_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, report_path)
    return 0


def read_scenario_file(path) -> tuple[ForgeScenario, dict]:
    """Read a scenario file: either a full scenario or ``{"generate": {...}}``.

    An optional top-level ``plan`` object is copied into the emitted run config.
    """
    data = dict(_read_json(path))
    overrides = data.pop("plan", {})
    _reject_unknown("plan overrides", overrides, PLAN_OVERRIDE_KEYS)
    if "generate" not in data:
        return ForgeScenario.from_dict(data), overrides
    _reject_unknown("scenario", data, {"generate"})
    gen = dict(data["generate"])
    if "spec" not in gen:
        raise ConfigError("scenario 'generate' section needs 'spec'")
    spec = ArchitectureSpec.from_dict(gen.pop("spec"))
    if "pool" in gen:
        gen["pool"] = [MergeOperatorConfig.from_dict(c) for c in gen["pool"]]
    try:
        return make_scenario(spec, **gen), overrides
    except TypeError as exc:
        raise ConfigError(f"bad scenario 'generate' section: {exc}") from None


def cmd_forge(args) -> int:
    scenario, overrides = read_scenario_file(args.scenario)
    out = Path(os.environ.get(OUT_DIR_ENV) or args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    forged = forge_scenario(scenario)
    save_checkpoint(forged.base, out / "base.armf")
    for b, ckpt in forged.experts.items():
        save_checkpoint(ckpt, out / f"expert_{b}.armf")
    write_calibration(forged.calibration, out / "calibration.jsonl")
    _write_json(compute_dev_scores(forged).to_dict(), out / "dev_scores.json")
    save_scenario(scenario, out / "scenario.json")
    plan = {
        "base": "base.armf",
        "experts": {b: f"expert_{b}.armf" for b in forged.experts},
        "calibration": "calibration.jsonl",
        "roles": {b: [r.to_dict() for r in rules] for b, rules in forged.rules.items()},
        "dev_scores": "dev_scores.json",
        "pool": [c.to_dict() for c in scenario.pool],
        "seed": scenario.seed,
        "transplant_conflict": "error" if scenario.overlap_mode == "disjoint" else "first_wins",
        **overrides,
    }
    _write_json({"plan": plan, "outputs": {"dir": "."}, "eval": {"scenario": "scenario.json"}},
                out / "run.json")
    return 0


def report_tables(report: dict) -> dict[str, list[dict]]:
    """Flatten a run report into plot-ready rows; needs nothing but the report."""
    if report.get("format", "").split("/")[0] != "armerge-report":
        raise ConfigError("not an armerge run report")
    ev = report.get("eval", {})
    dev = (report.get("dev_scores") or {})
    aos_rows = []
    for op, per_bench in sorted(report["aos"]["table"].items()):
        for b, aos in sorted(per_bench.items()):
            row = {"operator": op, "benchmark": b, "aos": aos,
                   "selected": op == report["aos"]["selected_operator"]}
            if op in ev.get("candidates", {}):
                row["score"] = ev["candidates"][op][b]
            elif row["selected"] and b in dev:
                row["score"] = dev[b][0]
            aos_rows.append(row)
    overlap_rows = [{"tracing": mode, "overlap_rate": rate} for mode, rate in sorted(report["overlap"].items())]
    sweep_rows = [{"k": s["k"], "protect": s["protect"], "selected_operator": s["selected_operator"],
                   "min_non_weak": s["min_non_weak"], "transplanted_total": s["transplanted_total"]}
                  for s in report.get("sweep", [])]
    return {"aos": aos_rows, "overlap": overlap_rows, "sweep": sweep_rows}


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = []
    for row in rows:
        fields += [f for f in row if f not in fields]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    tables = report_tables(_read_json(args.report))
    names = REPORT_TABLES if args.table == "all" else (args.table,)
    if args.format == "json":
        text = json.dumps({n: tables[n] for n in names}, indent=2, sort_keys=True) + "\n"
    elif len(names) == 1:
        text = _csv(tables[names[0]])
    else:
        text = "\n".join(f"# {n}\n{_csv(tables[n])}" for n in names)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="armerge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="apply one merge operator")
    m.add_argument("--op", required=True, choices=["average", "task_arithmetic", "ties", "ties_dare", "model_stock"])
    m.add_argument("--base")
    m.add_argument("--expert", action="append", required=True)
    m.add_argument("--lambda", dest="lam", type=float, default=1.0)
    m.add_argument("--density", type=float, default=0.5)
    m.add_argument("--drop-rate", type=float, default=0.5)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    t = sub.add_parser("trace", help="saliency map and top-k neuron set")
    t.add_argument("--model", required=True)
    t.add_argument("--calib", required=True)
    t.add_argument("--benchmark", required=True)
    t.add_argument("--role")
    t.add_argument("--k", type=float, default=0.1)
    t.add_argument("--role-agnostic", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    s = sub.add_parser("select", help="build the backbone pool and score AOS")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_select)

    r = sub.add_parser("run", help="full merge-and-transplant pipeline")
    r.add_argument("--config", required=True)
    r.add_argument("--out-model")
    r.add_argument("--out-report")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("forge", help="forge a synthetic scenario")
    f.add_argument("--scenario", required=True)
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_forge)

    rep = sub.add_parser("report", help="plot data from a run report")
    rep.add_argument("--report", required=True)
    rep.add_argument("--format", choices=["csv", "json"], default="csv")
    rep.add_argument("--table", choices=[*REPORT_TABLES, "all"], default="all")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        cause = exc.cause
        if isinstance(cause, OSError):
            return 3
        if isinstance(cause, ArmError) and not isinstance(cause, StageError):
            return cause.exit_code
        return 5
    if isinstance(exc, ArmError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    return 5


def _error_line(exc: BaseException, code: int) -> str:
    if isinstance(exc, OSError):
        where = exc.filename if exc.filename is not None else ""
        message = f"{exc.strerror or exc}: {where}" if where else str(exc)
        kind = "io"
    else:
        message, kind = str(exc), getattr(exc, "kind", type(exc).__name__)
    payload = {"error": kind, "exit_code": code, "message": message}
    if isinstance(exc, StageError):
        payload["stage"] = exc.stage
    return json.dumps(payload, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print(_error_line(ConfigError("--threads must be >= 1"), 2), file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ArmError, OSError) as exc:
        code = _exit_code(exc)
        print(_error_line(exc, code), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
