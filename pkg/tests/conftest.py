from pathlib import Path

import numpy as np
import pytest

from armerge.role_tracing import CalibrationTrajectory
from armerge.tensor_store import ArchitectureSpec, ModelCheckpoint, canonical_layout


def tiny_spec(mlp_kind="plain", **kw):
    base = dict(n_blocks=2, d_model=8, d_ff=6, n_heads=2, vocab_size=16, mlp_kind=mlp_kind, context_length=16)
    base.update(kw)
    return ArchitectureSpec(**base)


def random_checkpoint(spec, rng, scale=0.5):
    tensors = {}
    for name, shape in canonical_layout(spec).items():
        if name.endswith("norm"):
            tensors[name] = rng.uniform(0.5, 1.5, size=shape)
        else:
            tensors[name] = rng.uniform(-scale, scale, size=shape)
    return ModelCheckpoint(spec, tensors)


def perturbed(ckpt, rng, names=None, scale=0.1):
    """Copy of ``ckpt`` with noise added to ``names`` (all tensors by default)."""
    names = list(ckpt.tensors) if names is None else names
    return ckpt.replace({n: ckpt.tensors[n] + rng.uniform(-scale, scale, ckpt.tensors[n].shape) for n in names})


def oracle_tensors(ckpt):
    return {name: arr.astype(np.float64).tolist() for name, arr in ckpt.tensors.items()}


def oracle_spec(spec):
    return spec.to_dict()


def random_trajectory(rng, spec, bench="b", roles=("call",), min_len=2, max_len=None, p_role=0.7):
    max_len = max_len or spec.context_length
    n = int(rng.integers(min_len, max_len + 1))
    tokens = rng.integers(0, spec.vocab_size, size=n).tolist()
    spans = {}
    for role in roles:
        if rng.random() >= p_role:
            continue
        cuts = sorted(set(rng.integers(0, n + 1, size=4).tolist()))
        intervals = [(cuts[i], cuts[i + 1]) for i in range(0, len(cuts) - 1, 2) if cuts[i] < cuts[i + 1]]
        if intervals:
            spans[role] = intervals
    return CalibrationTrajectory(bench, tokens, spans)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def forge_config(name):
    """Forge the scenario in ``configs/<name>.json``; returns (forged, dev_scores, plan_overrides)."""
    from armerge.cli import read_scenario_file
    from armerge.expert_forge import compute_dev_scores, forge_scenario
    scenario, overrides = read_scenario_file(CONFIGS / f"{name}.json")
    forged = forge_scenario(scenario)
    return forged, compute_dev_scores(forged), overrides


@pytest.fixture(scope="session")
def disjoint_forged():
    return forge_config("disjoint")


@pytest.fixture(scope="session")
def overlapping_forged():
    return forge_config("overlapping")


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
