from __future__ import annotations

import numpy as np
import pytest

from pushgrasp import gradcheck
from pushgrasp.coordinator import Coordinator, CoordinatorFeatures, LabeledDecision, decide


def feats(q_g: float, o: float = 0.0) -> CoordinatorFeatures:
    return CoordinatorFeatures(q_p=0.5, q_g=q_g, o=o, a_b=0.1, a_n=0.2, f_c=0.0)


def test_decide_threshold_is_inclusive():
    assert decide(0.5) == "grasp"
    assert decide(0.4999) == "push"
    assert decide(0.9) == "grasp"


def test_features_reject_non_finite():
    with pytest.raises(ValueError):
        feats(float("inf")).as_array()
    f = feats(0.3)
    assert CoordinatorFeatures.from_array(f.as_array()) == f


def test_prediction_is_probability():
    c = Coordinator(np.random.default_rng(0))
    p = c.predict(feats(0.7))
    assert 0.0 < p < 1.0
    batch = c.predict_batch(np.random.default_rng(1).standard_normal((5, 6)) * 100)
    assert np.all((batch >= 0) & (batch <= 1))


def test_empty_buffer_trains_nothing():
    c = Coordinator(np.random.default_rng(0))
    before = c.params.checksum()
    assert c.record_and_train(None, np.random.default_rng(0), 1e-3) is None
    assert c.params.checksum() == before


def test_bad_label_rejected():
    c = Coordinator(np.random.default_rng(0))
    with pytest.raises(ValueError):
        c.record_and_train(LabeledDecision(feats(0.1), 2), np.random.default_rng(0), 1e-3)


def test_buffer_is_fifo_and_capped():
    c = Coordinator(np.random.default_rng(0), buffer_cap=5, batch_size=2)
    rng = np.random.default_rng(0)
    for i in range(8):
        c.record_and_train(LabeledDecision(feats(float(i)), i % 2), rng, 1e-3)
    assert len(c.buffer) == 5
    assert [d.features.q_g for d in c.buffer] == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_learns_a_separable_rule():
    # grasps succeed when the target is unoccluded
    c = Coordinator(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(600):
        o = float(rng.random())
        c.record_and_train(LabeledDecision(feats(0.5, o), int(o < 0.5)), rng, 1e-2)
    assert c.predict(feats(0.5, 0.05)) > 0.8
    assert c.predict(feats(0.5, 0.95)) < 0.2


def test_copy_is_independent():
    c = Coordinator(np.random.default_rng(0))
    c.record_and_train(LabeledDecision(feats(0.1), 1), np.random.default_rng(0), 1e-3)
    d = c.copy()
    d.record_and_train(LabeledDecision(feats(0.2), 0), np.random.default_rng(0), 1e-3)
    assert len(c.buffer) == 1 and len(d.buffer) == 2
    assert c.params.checksum() != d.params.checksum()


def test_coordinator_gradients():
    assert gradcheck.check_coordinator(seed=3).max_rel_error < 1e-6


def test_linear_layer_gradients():
    assert gradcheck.check_linear_layers(seed=3).max_rel_error < 1e-8
