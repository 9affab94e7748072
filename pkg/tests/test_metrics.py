import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from steptcn.errors import DimensionError, LabelError
from steptcn.metrics import (UNDEFINED_POLICY, VideoMetrics, dataset_metrics, frame_accuracy, metrics_csv,
                             metrics_json, per_class_prf, video_metrics)

GT, PRED = [0, 0, 1, 1], [0, 1, 1, 1]


def test_accuracy_examples():
    assert frame_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert frame_accuracy([0, 0], [1, 1]) == 0.0
    assert frame_accuracy(GT, PRED) == 0.75


def test_accuracy_length_mismatch():
    with pytest.raises(DimensionError):
        frame_accuracy([0, 1], [0])
    with pytest.raises(DimensionError):
        frame_accuracy([], [])


def test_per_class_worked_example():
    t = per_class_prf(GT, PRED, 2)
    assert np.allclose(t[0], [1.0, 0.5, 2 / 3], rtol=0, atol=1e-15)
    assert np.allclose(t[1], [2 / 3, 1.0, 0.8], rtol=0, atol=1e-15)


def test_video_metrics_worked_example():
    m = video_metrics(GT, PRED, 2)
    assert abs(m.pr - 5 / 6) < 1e-15
    assert abs(m.re - 0.75) < 1e-15
    assert abs(m.f1 - 11 / 15) < 1e-15
    assert m.acc == 0.75


def test_perfect_and_absent_classes():
    t = per_class_prf([2, 2, 0], [2, 2, 0], 4)
    assert np.array_equal(t[[0, 2]], np.ones((2, 3)))
    assert np.isnan(t[[1, 3]]).all()
    m = video_metrics([3, 3, 3], [3, 3, 3], 5)
    assert (m.acc, m.pr, m.re, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_undefined_branches():
    # class 1 predicted but absent from gt, class 2 present but never predicted
    t = per_class_prf([0, 2], [0, 1], 3)
    assert t[1].tolist() == [0.0, 0.0, 0.0]
    assert t[2].tolist() == [0.0, 0.0, 0.0]


def test_label_out_of_range():
    with pytest.raises(LabelError):
        per_class_prf([0, 3], [0, 0], 3)


@given(seed=st.integers(0, 2**31), T=st.integers(1, 40), C=st.integers(1, 8))
def test_matches_confusion_oracle(seed, T, C):
    r = np.random.default_rng(seed)
    gt, pred = r.integers(0, C, T), r.integers(0, C, T)
    table = per_class_prf(gt, pred, C)
    for c, row in enumerate(oracles.confusion_prf(gt.tolist(), pred.tolist(), C)):
        if row is None:
            assert np.isnan(table[c]).all()
        else:
            assert np.max(np.abs(table[c] - row)) < 1e-12
    m = video_metrics(gt, pred, C)
    ref = oracles.video_metrics_naive(gt.tolist(), pred.tolist(), C)
    assert np.max(np.abs(np.array([m.acc, m.pr, m.re, m.f1]) - ref)) < 1e-12
    assert all(0 <= v <= 1 for v in (m.acc, m.pr, m.re, m.f1))


@given(seed=st.integers(0, 2**31))
def test_relabeling_invariance(seed):
    r = np.random.default_rng(seed)
    gt, pred = r.integers(0, 6, 30), r.integers(0, 6, 30)
    perm = r.permutation(6)
    a = video_metrics(gt, pred, 6)
    b = video_metrics(perm[gt], perm[pred], 6)
    assert np.allclose([a.acc, a.pr, a.re, a.f1], [b.acc, b.pr, b.re, b.f1], rtol=0, atol=1e-12)


def _vm(acc, pr=0.5, re=0.5, f1=0.5):
    return VideoMetrics(acc, pr, re, f1)


def test_dataset_single_video():
    d = dataset_metrics([_vm(0.3, 0.2, 0.1, 0.4)])
    assert d.mean == {"acc": 0.3, "pr": 0.2, "re": 0.1, "f1": 0.4}
    assert set(d.std.values()) == {0.0}


def test_dataset_two_videos_sample_std():
    d = dataset_metrics([_vm(0.4), _vm(0.6)])
    assert abs(d.mean["acc"] - 0.5) < 1e-15
    assert abs(d.std["acc"] - math.sqrt(0.02)) < 1e-15
    assert abs(d.std["acc"] - 0.1414) < 1e-4


@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.randoms())
def test_dataset_permutation_invariant(accs, rnd):
    vids = [_vm(a) for a in accs]
    shuffled = vids[:]
    rnd.shuffle(shuffled)
    a, b = dataset_metrics(vids), dataset_metrics(shuffled)
    assert a.mean == b.mean and a.std == b.std
    assert all(v >= 0 for v in a.std.values())


def test_dataset_empty():
    with pytest.raises(ValueError):
        dataset_metrics([])


def test_json_flags_policy_and_csv():
    d = dataset_metrics([_vm(0.4), _vm(0.6)])
    doc = json.loads(metrics_json(d, {"v0": _vm(0.4)}))
    assert doc["undefined_policy"] == UNDEFINED_POLICY
    assert doc["videos"]["v0"]["acc"] == 0.4
    text = metrics_csv([{"video_id": "v0", **_vm(0.4).as_dict()}])
    assert text.splitlines()[0] == "video_id,acc,pr,re,f1"
