import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from augopt.augment import (OPS, AugmentationParams, apply, augment_batch, batch_objective_gradient, gate_scores,
                            m_index, p_index, param_names, realize_draw, score_function_gradient)
from augopt.errors import DataError, DegenerateAnatomyError, NumericalError
from augopt.gradcheck import SmoothObjective, exact_gate_derivative, toy_objective
from augopt.rng import RngKey
from augopt.synthetic import blob_mask, smooth_random_image


@pytest.fixture
def pair(rng):
    return smooth_random_image(rng, 16), blob_mask(16, (8.0, 8.0), 4.0, 1.5)


def test_all_gates_closed_is_identity(pair):
    img, mask = pair
    params = AugmentationParams.build(0.0, {op: 0.5 for op in OPS})
    batch = augment_batch(img, mask, params, 8, "interior", RngKey(1))
    assert all(d.is_identity for d in batch.draws)
    assert all(np.array_equal(x, img) for x in batch.images)
    assert all(np.array_equal(x, mask) for x in batch.masks)


def test_identity_draw_is_bitwise_unchanged(pair):
    img, mask = pair
    draw = realize_draw(AugmentationParams.identity(), np.full(6, 0.5), np.full(6, 0.5))
    out_img, out_mask = apply(img, mask, draw)
    assert np.array_equal(out_img, img) and np.array_equal(out_mask, mask)


def test_boundary_mode_hits_endpoints():
    params = AugmentationParams.build(1.0, {"rotate": 0.4, "scale": 0.3, "gamma": 1.5})
    u = np.random.default_rng(0).random((1000, 6))
    draws = realize_draw(params, np.zeros((1000, 6)), u, "boundary")
    assert set(np.round(draws.values[:, 1], 12)) == {-0.4, 0.4}
    assert set(np.round(draws.values[:, 5], 12)) == {0.7, 1.3}
    # gamma lower end is floored
    assert set(np.round(draws.values[:, 0], 12)) == {0.05, 2.5}


def test_interior_mode_mean_and_range():
    params = AugmentationParams.build(1.0, {"rotate": 0.5})
    u = np.random.default_rng(0).random((100_000, 6))
    values = realize_draw(params, np.zeros((100_000, 6)), u, "interior").values[:, 1]
    assert values.min() >= -0.5 and values.max() <= 0.5
    assert abs(values.mean()) < 3 * (1 / np.sqrt(3)) * 0.5 / np.sqrt(values.size)


def test_gamma_example():
    img = np.full((4, 4), 0.5)
    draw = realize_draw(AugmentationParams.build({"gamma": 1.0}, {"gamma": 1.0}), np.zeros(6), np.ones(6) * 0.9)
    out, _ = apply(img, np.ones((4, 4)), draw)
    assert np.allclose(out, 0.25)


def test_serialization_round_trip():
    params = AugmentationParams.build({"rotate": 0.5, "gamma": 0.25}, {"rotate": 0.3, "shear": 0.2})
    assert np.array_equal(AugmentationParams.from_json(params.to_json()).vector, params.vector)
    data = json.loads(params.to_json())
    assert list(data)[1:] == param_names()


def test_serialization_rejects_bad_keys():
    data = AugmentationParams.identity().to_dict()
    with pytest.raises(DataError, match="unknown"):
        AugmentationParams.from_dict({**data, "blur.m": 0.1})
    data.pop("rotate.m")
    with pytest.raises(DataError, match="missing"):
        AugmentationParams.from_dict(data)
    with pytest.raises(DataError, match="format_version"):
        AugmentationParams.from_dict({k: v for k, v in AugmentationParams.identity().to_dict().items()
                                      if k != "format_version"})


def test_out_of_range_rejected():
    with pytest.raises(DataError, match="rotate.p"):
        AugmentationParams.identity().with_values(rotate_p=1.5)


def test_clamped_reports_active_entries():
    raw = np.zeros(12)
    raw[m_index("rotate")] = 5.0
    raw[p_index("gamma")] = -0.1
    params, active = AugmentationParams.clamped(raw)
    assert params.m("rotate") == pytest.approx(np.pi) and params.p("gamma") == 0.0
    assert active.sum() == 2


def test_replay_is_deterministic(pair):
    img, mask = pair
    params = AugmentationParams.build(0.5, {op: 0.3 for op in OPS})
    a = augment_batch(img, mask, params, 6, "boundary", RngKey(7, (1,)))
    b = augment_batch(img, mask, params, 6, "boundary", RngKey(7, (1,)))
    assert np.array_equal(a.images, b.images)
    replay = [apply(img, mask, realize_draw(params, d.gate_u, d.magnitude_u, d.mode))[0] for d in a.draws]
    assert np.allclose(replay, a.images, atol=1e-12)


def test_degenerate_draws_are_skipped(pair):
    img, mask = pair
    params = AugmentationParams.build({"translate_x": 1.0}, {"translate_x": 0.5})
    batch = augment_batch(img, mask, params, 4, "boundary", RngKey(0), min_overlap=0.9, max_retries=2)
    assert batch.skipped == 4 and not batch.draws
    with pytest.raises(DegenerateAnatomyError):
        batch_objective_gradient(img, mask, params, 4, SmoothObjective(np.random.default_rng(0), (4, 16, 16)),
                                 key=RngKey(0), min_overlap=0.9, max_retries=2)


def test_gate_scores_examples():
    assert np.allclose(gate_scores([True, False], [0.25, 0.25]), [4.0, -4 / 3])


def test_score_function_single_gate_worked_example():
    # values 1,0 with gates on/off at p=0.5, two draws: leave-one-out baseline 0 and 1
    est = score_function_gradient([1.0, 0.0], [[True], [False]], [0.5])
    assert est == pytest.approx([(1 * 2 + (-1) * -2) / 2])


def test_score_function_is_unbiased_for_small_batches():
    probs = np.array([0.3, 0.7])
    rng = np.random.default_rng(5)
    gates = rng.random((200_000, 2, 2)) < probs
    est = score_function_gradient(toy_objective(gates), gates, probs)
    se = est.std(axis=0) / np.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - exact_gate_derivative(toy_objective, probs)) < 4 * se)


@given(st.floats(0.05, 0.95))
def test_constant_objective_has_zero_score_gradient(p):
    gates = np.random.default_rng(0).random((5, 3)) < p
    assert np.allclose(score_function_gradient(np.full(5, 0.7), gates, np.full(3, p)), 0.0)


def test_gamma_gradient_matches_finite_difference(pair):
    img, mask = pair
    img = 0.1 + 0.8 * img
    objective = SmoothObjective(np.random.default_rng(2), (4, 16, 16))
    params = AugmentationParams.build({"gamma": 1.0}, {"gamma": 0.4})
    key = RngKey(3)
    _, grad, _, _ = batch_objective_gradient(img, mask, params, 4, objective, "interior", key)

    def value(m):
        return batch_objective_gradient(img, mask, params.with_values(gamma_m=m), 4, objective, "interior", key)[0]

    h = 1e-5
    numeric = (value(0.4 + h) - value(0.4 - h)) / (2 * h)
    assert grad.pathwise[m_index("gamma")] == pytest.approx(numeric, rel=1e-6)


def test_identity_params_have_zero_bound_gradient(pair):
    img, mask = pair
    objective = SmoothObjective(np.random.default_rng(2), (4, 16, 16))
    _, grad, _, _ = batch_objective_gradient(img, mask, AugmentationParams.identity(), 4, objective)
    assert np.all(grad.pathwise[1::2] == 0.0)


def test_non_finite_objective_names_the_draw(pair):
    img, mask = pair

    def bad(images, masks, need_grad=False):
        values = np.ones(len(images))
        values[2] = np.nan
        return values, None, None

    with pytest.raises(NumericalError, match="draw 2"):
        batch_objective_gradient(img, mask, AugmentationParams.identity(), 4, bad)


def test_unknown_mode():
    with pytest.raises(DataError):
        realize_draw(AugmentationParams.identity(), np.zeros(6), np.zeros(6), "edge")
