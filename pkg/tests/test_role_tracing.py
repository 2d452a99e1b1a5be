import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from armerge.errors import InputError, RoleCoverageError, ValidationError
from armerge.role_tracing import (CalibrationTrajectory, RoleRule, SaliencyMap, compute_saliency,
                                  compute_saliency_role_agnostic, neuron_set_from_json, neuron_set_to_json,
                                  overlap_rate, parse_role_spans, read_calibration, select_topk, target_role,
                                  topk_count, write_calibration)
from armerge.tensor_store import mlp_names
from conftest import oracle_spec, oracle_tensors, random_checkpoint, random_trajectory, tiny_spec

CALL = RoleRule("call", (7,), (9,), target=True)


def _zero_mlp(ckpt):
    zeros = {}
    for layer in range(ckpt.spec.n_blocks):
        names = mlp_names(layer)
        zeros[names["w_in"]] = np.zeros_like(ckpt[names["w_in"]])
        zeros[names["b_in"]] = np.zeros_like(ckpt[names["b_in"]])
    return ckpt.replace(zeros)


def _map(rows):
    return SaliencyMap(np.asarray(rows, dtype=np.float64), "m", "b", "r", 1)


def test_rule_invariants():
    with pytest.raises(ValidationError):
        RoleRule("r", (), (1,))
    with pytest.raises(ValidationError):
        RoleRule("r", (1, 2), (1, 2))
    with pytest.raises(ValidationError):
        target_role([RoleRule("a", (1,), (2,)), RoleRule("b", (3,), (4,))])
    with pytest.raises(ValidationError):
        target_role([RoleRule("a", (1,), (2,), True), RoleRule("b", (3,), (4,), True)])
    assert target_role([RoleRule("a", (1,), (2,)), CALL]) == "call"


def test_trajectory_invariants():
    with pytest.raises(ValidationError):
        CalibrationTrajectory("b", [1, 2, 3], {"r": [(2, 4)]})
    with pytest.raises(ValidationError):
        CalibrationTrajectory("b", [1, 2, 3], {"r": [(0, 2), (1, 3)]})
    with pytest.raises(ValidationError):
        CalibrationTrajectory("b", [1, 2, 3], {"r": [(2, 2)]})


def test_parse_no_markers():
    spans, warnings = parse_role_spans([1, 2, 3], [CALL, RoleRule("think", (4,), (5,))])
    assert spans == {"call": [], "think": []} and warnings == 0


def test_parse_single_span():
    assert parse_role_spans([7, 1, 2, 9], [CALL]) == ({"call": [(1, 3)]}, 0)


def test_parse_two_spans_and_unclosed():
    tokens = [7, 1, 9, 3, 7, 2, 2, 9, 4, 7, 5]
    spans, warnings = parse_role_spans(tokens, [CALL])
    assert spans["call"] == [(1, 2), (5, 7)] and warnings == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=30), st.lists(st.integers(0, 5), min_size=1, max_size=2),
       st.lists(st.integers(0, 5), min_size=1, max_size=2))
def test_parse_matches_scan_oracle(tokens, start, end):
    if start == end:
        return
    rule = RoleRule("r", start, end, target=True)
    spans, warnings = parse_role_spans(tokens, [rule])
    ref, ref_warnings = oracles.parse_spans(tokens, start, end)
    assert spans["r"] == ref and warnings == ref_warnings
    for s, e in spans["r"]:
        assert tokens[s - len(start):s] == start and tokens[e:e + len(end)] == end


def test_calibration_roundtrip_and_reparse(tmp_path):
    trajs = [CalibrationTrajectory("b", [7, 1, 2, 9, 3], {"call": [(1, 3)]}),
             CalibrationTrajectory("c", [0, 7, 4, 9], {})]
    path = tmp_path / "cal.jsonl"
    write_calibration(trajs, path)
    back = read_calibration(path)
    assert [t.to_dict() for t in back] == [t.to_dict() for t in trajs]
    reparsed = read_calibration(path, {"c": [CALL]})
    assert reparsed[1].role_spans == {"call": [(2, 3)]}
    assert reparsed[0].role_spans == {"call": [(1, 3)]}


def test_bad_calibration_line(tmp_path):
    path = tmp_path / "cal.jsonl"
    path.write_text('{"benchmark_id": "b"}\n')
    with pytest.raises(ValidationError, match=":1:"):
        read_calibration(path)


def test_zero_model_zero_saliency(rng):
    spec = tiny_spec()
    model = _zero_mlp(random_checkpoint(spec, rng))
    trajs = [CalibrationTrajectory("b", [1, 2, 3, 4], {"call": [(1, 3)]})]
    assert not compute_saliency(model, trajs, "call").scores.any()
    assert not compute_saliency_role_agnostic(model, trajs).scores.any()


def test_single_position_saliency_is_abs_activation(rng):
    from armerge.toy_transformer import forward
    model = random_checkpoint(tiny_spec(), rng)
    tokens = [3, 1, 4, 1, 5]
    _, trace = forward(model, tokens, capture=True)
    sal = compute_saliency(model, [CalibrationTrajectory("b", tokens, {"call": [(2, 3)]})], "call")
    expected = np.stack([np.abs(trace[layer][2]) for layer in range(2)]).astype(np.float64)
    assert sal.scores.tobytes() == expected.tobytes()
    assert sal.trajectory_count == 1


def test_saliency_oracle_skips_role_free(rng):
    spec = tiny_spec()
    model = random_checkpoint(spec, rng)
    trajs = [CalibrationTrajectory("b", [1, 2, 3, 4, 5], {"call": [(0, 2)]}),
             CalibrationTrajectory("b", [5, 6, 7], {"think": [(0, 3)]}),
             CalibrationTrajectory("b", [8, 9, 10, 11], {"call": [(1, 2), (3, 4)]})]
    sal = compute_saliency(model, trajs, "call")
    ref, count = oracles.saliency(oracle_tensors(model), oracle_spec(spec),
                                  [(t.token_ids, t.role_spans) for t in trajs], "call")
    assert sal.trajectory_count == count == 2
    np.testing.assert_allclose(sal.scores, ref, atol=1e-6)


def test_role_agnostic_one_token_equivalence(rng):
    model = random_checkpoint(tiny_spec(), rng)
    t = CalibrationTrajectory("b", [6], {"call": [(0, 1)]})
    a = compute_saliency_role_agnostic(model, [t])
    b = compute_saliency(model, [t], "call")
    assert a.scores.tobytes() == b.scores.tobytes()


def test_role_agnostic_oracle(rng):
    spec = tiny_spec()
    model = random_checkpoint(spec, rng)
    trajs = [random_trajectory(rng, spec) for _ in range(2)]
    full = [(t.token_ids, {"all": [(0, len(t.token_ids))]}) for t in trajs]
    ref, _ = oracles.saliency(oracle_tensors(model), oracle_spec(spec), full, "all")
    np.testing.assert_allclose(compute_saliency_role_agnostic(model, trajs).scores, ref, atol=1e-6)


def test_saliency_errors(rng):
    model = random_checkpoint(tiny_spec(), rng)
    with pytest.raises(InputError):
        compute_saliency(model, [], "call")
    with pytest.raises(InputError):
        compute_saliency_role_agnostic(model, [])
    with pytest.raises(RoleCoverageError):
        compute_saliency(model, [CalibrationTrajectory("b", [1, 2], {})], "call")
    mixed = [CalibrationTrajectory("a", [1], {"call": [(0, 1)]}), CalibrationTrajectory("b", [1], {"call": [(0, 1)]})]
    with pytest.raises(InputError):
        compute_saliency(model, mixed, "call")


def test_saliency_threaded_matches_sequential(rng):
    from concurrent.futures import ThreadPoolExecutor
    spec = tiny_spec()
    model = random_checkpoint(spec, rng)
    trajs = [random_trajectory(rng, spec, p_role=1.0) for _ in range(8)]
    trajs = [t for t in trajs if t.positions("call")]
    with ThreadPoolExecutor(4) as pool:
        threaded = compute_saliency(model, trajs, "call", executor=pool)
    assert threaded.scores.tobytes() == compute_saliency(model, trajs, "call").scores.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.randoms(use_true_random=False))
def test_saliency_order_invariant(seed, shuffler):
    rng = np.random.default_rng(seed)
    spec = tiny_spec()
    model = random_checkpoint(spec, rng)
    trajs = [random_trajectory(rng, spec) for _ in range(5)]
    if not any(t.positions("call") for t in trajs):
        trajs.append(CalibrationTrajectory("b", [1, 2], {"call": [(0, 2)]}))
    shuffled = list(trajs)
    shuffler.shuffle(shuffled)
    a = compute_saliency(model, trajs, "call")
    b = compute_saliency(model, shuffled, "call")
    assert a.scores.tobytes() == b.scores.tobytes()


def test_topk_counts():
    assert topk_count(1.0, 64) == 64
    assert topk_count(0.25, 8) == 2
    assert topk_count(0.1, 15) == 2
    assert topk_count(0.07, 100) == 7
    with pytest.raises(ValidationError):
        topk_count(0.0, 8)


def test_topk_full_and_ties():
    sal = _map([[1, 1, 1, 1], [0, 3, 3, 1]])
    assert select_topk(sal, 1.0) == {(b, j) for b in range(2) for j in range(4)}
    assert select_topk(sal, 0.5) == {(0, 0), (0, 1), (1, 1), (1, 2)}


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 20), st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.9, 1.0]),
       st.integers(0, 2 ** 31))
def test_topk_matches_oracle(blocks, d_ff, k, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=(blocks, d_ff)).astype(np.float64)
    chosen = select_topk(_map(scores), k)
    assert chosen == oracles.topk(scores.tolist(), k)
    for layer in range(blocks):
        assert sum(1 for n in chosen if n[0] == layer) == topk_count(k, d_ff)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([0.1, 0.3, 0.5]), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_topk_scale_monotone(seed, k, c):
    # In a gated block z = silu(W_gate h) * (W_in h + b_in), so scaling W_in and b_in scales z by c.
    # Powers of two keep the float32 scaling exact.
    rng = np.random.default_rng(seed)
    spec = tiny_spec("gated", d_ff=10)
    model = random_checkpoint(spec, rng)
    names = mlp_names(0)
    scaled = model.replace({names["w_in"]: model[names["w_in"]] * c, names["b_in"]: model[names["b_in"]] * c})
    trajs = [CalibrationTrajectory("b", rng.integers(0, 16, 6).tolist(), {"call": [(1, 5)]})]
    before = select_topk(compute_saliency(model, trajs, "call"), k)
    after = select_topk(compute_saliency(scaled, trajs, "call"), k)
    assert {n for n in before if n[0] == 0} == {n for n in after if n[0] == 0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_topk_depends_only_on_ranking(seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(24).reshape(2, 12).astype(np.float64)
    warped = np.exp(scores / 3.0) + 5.0
    assert select_topk(_map(scores), 0.25) == select_topk(_map(warped), 0.25)


def test_overlap_examples():
    a, b, c, d = (0, 0), (0, 1), (0, 2), (0, 3)
    assert overlap_rate([{a, b}, {a, b}]) == 1.0
    assert overlap_rate([{a}, {b}, {c}]) == 0.0
    assert overlap_rate([{a, b}, {b, c}, {c, d}]) == 0.5
    assert overlap_rate([set(), set()]) == 0.0
    with pytest.raises(InputError):
        overlap_rate([{a}])


neuron_sets = st.frozensets(st.tuples(st.integers(0, 2), st.integers(0, 5)), max_size=10)


@settings(max_examples=100, deadline=None)
@given(st.lists(neuron_sets, min_size=2, max_size=5), st.randoms(use_true_random=False))
def test_overlap_properties(sets, shuffler):
    rate = overlap_rate(sets)
    assert 0.0 <= rate <= 1.0
    assert rate == pytest.approx(oracles.overlap(sets))
    shuffled = list(sets)
    shuffler.shuffle(shuffled)
    assert overlap_rate(shuffled) == rate


def test_neuron_set_json_roundtrip():
    s = frozenset({(1, 3), (0, 5)})
    assert neuron_set_to_json(s) == [[0, 5], [1, 3]]
    assert neuron_set_from_json(neuron_set_to_json(s)) == s
