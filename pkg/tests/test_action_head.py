# test_action_head.py
import numpy as np
import pytest

from action_head import (ActionPredictor, Discretizer, _log_softmax, action_loss, action_loss_grad, fit_discretizer,
                         fit_edges, greedy_indices, predict_action)
from errors import DegenerateDimensionError, ShapeMismatchError
from nn import check_gradients


def _uniform_actions(n, seed=0):
    rng = np.random.default_rng(seed)
    actions = rng.uniform(-0.02, 0.02, size=(n, 7))
    actions[:, 6] = rng.integers(0, 2, size=n)
    return actions


def test_integer_values_fill_one_bin_each():
    edges = fit_edges(np.arange(256, dtype=float))
    indices = np.searchsorted(edges[1:256], np.arange(256), side="right")
    assert np.array_equal(indices, np.arange(256))


def test_uniform_samples_give_equal_bin_counts():
    discretizer = fit_discretizer(_uniform_actions(25_600))
    counts = np.bincount(discretizer.encode_batch(_uniform_actions(25_600))[:, 0], minlength=256)
    assert counts.min() >= 99 and counts.max() <= 101


def test_constant_dimension_is_degenerate():
    actions = _uniform_actions(300)
    actions[:, 2] = 0.0
    with pytest.raises(DegenerateDimensionError) as info:
        fit_discretizer(actions)
    assert info.value.dimension == 2


def test_edges_strictly_increasing_with_ties():
    values = np.concatenate([np.zeros(500), np.linspace(0.0, 1.0, 20)])
    assert np.all(np.diff(fit_edges(values)) > 0)


def test_encode_decode_encode_is_idempotent():
    discretizer = fit_discretizer(_uniform_actions(5000))
    actions = _uniform_actions(10_000, seed=1)
    first = discretizer.encode_batch(actions)
    decoded = np.stack([discretizer.decode(row) for row in first])
    assert np.array_equal(discretizer.encode_batch(decoded), first)


def test_decode_error_within_bin_width():
    discretizer = fit_discretizer(_uniform_actions(5000))
    lo, hi = discretizer.edges[:, 0], discretizer.edges[:, -1]
    actions = _uniform_actions(10_000, seed=2)
    actions[:, :6] = np.clip(actions[:, :6], lo, hi)
    widths = discretizer.bin_widths()
    for action in actions:
        bins = discretizer.encode(action)
        error = np.abs(discretizer.decode(bins)[:6] - action[:6])
        assert np.all(error <= widths[np.arange(6), bins[:6]] + 1e-15)


def test_gripper_uses_end_bins():
    discretizer = fit_discretizer(_uniform_actions(1000))
    closed = discretizer.encode(np.array([0, 0, 0, 0, 0, 0, 1.0]))
    assert closed[6] == 255
    assert discretizer.decode(closed)[6] == 1.0
    assert discretizer.encode(np.zeros(7))[6] == 0


def test_out_of_range_values_clip_to_end_bins():
    discretizer = fit_discretizer(_uniform_actions(1000))
    bins = discretizer.encode(np.array([1.0, -1.0, 0, 0, 0, 0, 0]))
    assert bins[0] == 255 and bins[1] == 0


def test_decode_rejects_bad_indices():
    discretizer = fit_discretizer(_uniform_actions(1000))
    with pytest.raises(IndexError):
        discretizer.decode([0, 0, 0, 0, 0, 0, 256])
    with pytest.raises(ShapeMismatchError):
        discretizer.decode([0, 0])


def test_discretizer_blocks_roundtrip():
    discretizer = fit_discretizer(_uniform_actions(1000))
    restored = Discretizer.from_blocks(discretizer.blocks())
    assert np.array_equal(restored.edges, discretizer.edges)


def test_log_softmax_reference():
    logits = np.random.default_rng(3).normal(scale=5.0, size=(7, 256))
    reference = logits - np.log(np.sum(np.exp(logits), axis=-1, keepdims=True))
    np.testing.assert_allclose(_log_softmax(logits), reference, atol=1e-12)


def test_action_loss_uniform_logits_is_log_bins():
    assert action_loss(np.zeros((7, 256)), np.zeros(7, dtype=int)) == pytest.approx(np.log(256))


def test_action_loss_rejects_out_of_range_targets():
    with pytest.raises(IndexError):
        action_loss(np.zeros((7, 256)), np.full(7, 256))


def test_action_loss_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 7, 16))
    targets = rng.integers(0, 16, size=(2, 7))
    report = check_gradients(lambda: action_loss(logits, targets), {"z": logits},
                             {"z": action_loss_grad(logits, targets)}, max_per_param=40)
    assert report.max_error < 1e-4


def test_action_predictor_shapes_and_gradients():
    rng = np.random.default_rng(5)
    predictor = ActionPredictor(8, 1, 2, history=1, rng=rng, ffn_mult=2, n_bins=16)
    waypoint, history, states = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 2, 4, 8)), rng.normal(size=(2, 2, 7))
    targets = rng.integers(0, 16, size=(2, 7))
    logits = predictor.forward(waypoint, history, states)
    assert logits.shape == (2, 7, 16)

    predictor.zero_grad()
    d_waypoint = predictor.backward(action_loss_grad(predictor.forward(waypoint, history, states), targets))
    loss = lambda: action_loss(predictor.forward(waypoint, history, states), targets)
    report = check_gradients(loss, predictor.parameters(), predictor.gradients(), max_per_param=5)
    assert report.max_error < 1e-4
    through = check_gradients(loss, {"w": waypoint}, {"w": d_waypoint}, max_per_param=20)
    assert through.max_error < 1e-4


def test_predict_action_single_sample():
    rng = np.random.default_rng(6)
    predictor = ActionPredictor(8, 1, 2, history=1, rng=rng).eval()
    logits = predict_action(predictor, rng.normal(size=(4, 8)), list(rng.normal(size=(2, 4, 8))),
                            rng.normal(size=(2, 7)))
    assert logits.shape == (7, 256)
    assert greedy_indices(logits).shape == (7,)
