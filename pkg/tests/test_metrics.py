"""Accuracy and calibration error."""

import numpy as np
import pytest

from bayonet.errors import EmptyInput
from bayonet.metrics import accuracy, ece


def _rows(confidences, n_classes=2):
    """Two-class rows whose max prob is the given confidence, argmax class 0."""
    out = np.zeros((len(confidences), n_classes))
    for i, c in enumerate(confidences):
        out[i, 0] = c
        out[i, 1:] = (1 - c) / (n_classes - 1)
    return out


def test_ece_hand_case():
    # four predictions, 10 bins, worked by hand:
    #   bin (0.9,1.0]: conf {0.95, 0.95}, correct {1, 0} -> |0.5 - 0.95| * 2/4
    #   bin (0.6,0.7]: conf {0.65},       correct {1}    -> |1.0 - 0.65| * 1/4
    #   bin (0.5,0.6]: conf {0.55},       correct {1}    -> |1.0 - 0.55| * 1/4
    # total = 0.225 + 0.0875 + 0.1125 = 0.425
    probs = _rows([0.95, 0.95, 0.65, 0.55])
    labels = np.array([0, 1, 0, 0])
    report = ece(probs, labels, n_bins=10)
    assert report.ece == pytest.approx(0.425, abs=1e-12)
    assert report.accuracy == pytest.approx(0.75)


def test_perfectly_calibrated_bins_give_zero():
    # conf 0.8 rows that are right exactly 80% of the time
    probs = _rows([0.8] * 10)
    labels = np.array([0] * 8 + [1] * 2)
    report = ece(probs, labels, n_bins=10)
    assert report.ece == pytest.approx(0.0, abs=1e-12)


def test_bin_edges_go_to_lower_bin():
    # conf exactly 0.5 belongs to (0.4, 0.5], not (0.5, 0.6]
    probs = _rows([0.5, 0.51])
    labels = np.array([0, 0])
    report = ece(probs, labels, n_bins=10)
    by_range = {(b.lower, b.upper): b.count for b in report.bins}
    assert by_range[(0.4, 0.5)] == 1
    assert by_range[(0.5, 0.6)] == 1


def test_low_confidence_lands_in_first_bin():
    probs = np.full((3, 4), 0.25)  # argmax ties at conf 0.25 with 4 classes
    labels = np.array([0, 1, 2])
    report = ece(probs, labels, n_bins=4)
    assert report.bins[0].count == 3
    assert sum(b.count for b in report.bins) == 3


def test_empty_bins_do_not_contribute():
    probs = _rows([0.95, 0.96])
    labels = np.array([0, 0])
    report = ece(probs, labels, n_bins=10)
    assert sum(1 for b in report.bins if b.count) == 1
    assert report.ece == pytest.approx(abs(1.0 - 0.955))
    for b in report.bins:
        if not b.count:
            assert b.mean_confidence == 0.0 and b.empirical_accuracy == 0.0


def test_accuracy_argmax_ties_take_lowest_index():
    probs = np.array([[0.5, 0.5], [0.4, 0.6]])
    assert accuracy(probs, np.array([0, 1])) == 1.0
    assert accuracy(probs, np.array([1, 0])) == 0.0


def test_single_bin_reduces_to_global_gap():
    probs = _rows([0.9, 0.7, 0.6, 0.8])
    labels = np.array([0, 0, 1, 1])
    report = ece(probs, labels, n_bins=1)
    assert report.ece == pytest.approx(abs(0.5 - 0.75))


def test_report_table_and_dict():
    probs = _rows([0.95, 0.95, 0.65, 0.55])
    labels = np.array([0, 1, 0, 0])
    report = ece(probs, labels)
    assert "accuracy 0.7500" in report.as_table()
    d = report.as_dict()
    assert d["ece"] == pytest.approx(0.425)
    assert len(d["bins"]) == 10


def test_input_validation():
    with pytest.raises(EmptyInput):
        accuracy(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyInput):
        ece(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        ece(_rows([0.5]), np.array([0]), n_bins=0)


def test_ece_bounded_by_one():
    rng = np.random.default_rng(0)
    raw = rng.random((200, 5))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 5, size=200)
    report = ece(probs, labels)
    assert 0.0 <= report.ece <= 1.0
    assert sum(b.count for b in report.bins) == 200
