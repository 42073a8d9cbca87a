import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiepose.errors import InvalidInputError
from hiepose.metrics import (DEFAULT_OKS_THRESHOLDS, average_precision, box_ap, keypoint_ap,
                             log_average_miss_rate, match_greedy, miss_rate_curve, weighted_ap)
from hiepose.posenms import OksParams
from hiepose.structures import DetectionBox

from helpers import make_pose
from oracles import ap_bruteforce, log_average


# -- matching --------------------------------------------------------------------

def test_match_all_true_positives():
    res = match_greedy([0.9, 0.8, 0.7], 3, lambda p, g: 1.0 if p == g else 0.0, 0.5)
    assert sorted(res.matches) == [(0, 0), (1, 1), (2, 2)]
    assert res.false_positives == [] and res.false_negatives == []


def test_match_no_predictions():
    res = match_greedy([], 4, lambda p, g: 1.0, 0.5)
    assert res.matches == [] and res.false_negatives == [0, 1, 2, 3]


def _oracle_match(scores, sim, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    taken, matches = set(), []
    for p in order:
        cands = [(sim[p][g], -g) for g in range(len(sim[p])) if g not in taken and sim[p][g] >= thr]
        if cands:
            g = -max(cands)[1]
            taken.add(g)
            matches.append((p, g))
    return matches


def test_match_random_against_oracle(rng):
    for _ in range(200):
        scores = rng.random(10).round(1).tolist()
        sim = rng.random((10, 6)).round(2)
        thr = float(rng.uniform(0.2, 0.8))
        res = match_greedy(scores, 6, lambda p, g: sim[p, g], thr)
        assert res.matches == _oracle_match(scores, sim.tolist(), thr)
        assert len(res.matches) + len(res.false_positives) == 10
        assert len(res.matches) + len(res.false_negatives) == 6


# -- AP -------------------------------------------------------------------------

def test_ap_worked_examples():
    assert average_precision([True, True, True], 3) == 1.0
    assert average_precision([False, False], 2) == 0.0
    assert average_precision([True, False, True], 2) == pytest.approx(1.0 * 0.5 + (2 / 3) * 0.5, abs=1e-12)


def test_ap_vacuous_cases():
    assert average_precision([], 0) == 1.0
    assert average_precision([True], 0) == 0.0
    assert average_precision([], 3) == 0.0


def test_ap_matches_threshold_enumeration(rng):
    for _ in range(300):
        n = int(rng.integers(0, 13))
        scores = rng.integers(0, 6, n) / 5.0  # ties are common
        tp = rng.random(n) < 0.6
        gt = int(tp.sum() + rng.integers(0, 3))
        order = np.argsort(-scores, kind="stable")
        got = average_precision(tp[order], gt, scores[order])
        assert got == pytest.approx(ap_bruteforce(scores.tolist(), tp.tolist(), gt), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), max_size=12), st.integers(0, 4))
def test_ap_invariant_under_monotone_transform(items, extra):
    # discrete scores keep the warp strictly monotone in floating point
    scores = np.array([s / 20 for s, _ in items], dtype=np.float64)
    tp = np.array([t for _, t in items], dtype=bool)
    gt = int(tp.sum()) + extra
    order = np.argsort(-scores, kind="stable")
    a = average_precision(tp[order], gt, scores[order])
    warped = np.exp(3 * scores) - 7
    order2 = np.argsort(-warped, kind="stable")
    assert average_precision(tp[order2], gt, warped[order2]) == pytest.approx(a, abs=1e-12)
    assert 0.0 <= a <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.data())
def test_ap_non_increasing_when_tp_flipped(flags, data):
    gt = max(sum(flags), 1)
    idx = [i for i, f in enumerate(flags) if f]
    if not idx:
        return
    k = data.draw(st.sampled_from(idx))
    worse = list(flags)
    worse[k] = False
    assert average_precision(worse, gt) <= average_precision(flags, gt) + 1e-12


# -- keypoint AP ------------------------------------------------------------------

def test_keypoint_ap_perfect(rng):
    gt = [make_pose(rng.uniform(0, 100, (14, 2)), frame=f) for f in range(4) for _ in range(3)]
    assert keypoint_ap(gt, gt) == 1.0
    assert keypoint_ap([g.copy() for g in gt], gt, (0.5, 0.95)) == 1.0


def test_keypoint_ap_constructed_oks():
    sigma = 0.08
    gt = make_pose([[0, 0], [10, 10]], frame=0)
    area = 100.0
    d = math.sqrt(-math.log(0.6) * 2 * area * (2 * sigma) ** 2)
    pred = make_pose([[d, 0], [10 + d, 10]], frame=0, score=0.9)
    params = OksParams.uniform(2, sigma)
    assert keypoint_ap([pred], [gt], (0.5,), params) == 1.0
    assert keypoint_ap([pred], [gt], (0.75,), params) == 0.0
    assert keypoint_ap([pred], [gt], (0.5, 0.75), params) == pytest.approx(0.5)


def test_keypoint_ap_empty_and_mismatch():
    assert keypoint_ap([], []) == 1.0
    with pytest.raises(InvalidInputError):
        keypoint_ap([make_pose([[0, 0]], frame=0)], [make_pose([[0, 0], [1, 1]], frame=0)])
    with pytest.raises(InvalidInputError):
        keypoint_ap([make_pose([[0, 0]], frame=0)], [make_pose([[0, 0]], frame=0)], (1.0,))


def test_default_oks_thresholds():
    assert len(DEFAULT_OKS_THRESHOLDS) == 10
    np.testing.assert_allclose(DEFAULT_OKS_THRESHOLDS, np.arange(0.5, 0.96, 0.05))


def test_keypoint_matching_is_per_frame():
    a = make_pose([[0, 0], [10, 10]], frame=0)
    b = make_pose([[0, 0], [10, 10]], frame=1)
    assert keypoint_ap([a], [b]) == 0.0


def test_box_ap():
    gt = [DetectionBox(0, 0, 10, 10, frame=0), DetectionBox(20, 0, 30, 10, frame=0)]
    pred = [DetectionBox(0, 0, 10, 10, score=0.9, frame=0),
            DetectionBox(50, 50, 60, 60, score=0.8, frame=0),
            DetectionBox(21, 0, 31, 10, score=0.7, frame=0)]
    assert box_ap(pred, gt) == pytest.approx(0.5 + 0.5 * 2 / 3)


# -- weighted AP --------------------------------------------------------------------

def test_weighted_ap_examples():
    assert weighted_ap({"a": (0.3, 5.0)}) == pytest.approx(0.3)
    assert weighted_ap({"a": (0.2, 1.0), "b": (0.8, 1.0)}) == pytest.approx(0.5)
    assert weighted_ap({"a": (0.6, 100), "b": (0.8, 300)}) == pytest.approx(0.75)
    with pytest.raises(InvalidInputError):
        weighted_ap({"a": (0.6, 0.0)})
    with pytest.raises(InvalidInputError):
        weighted_ap({})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.01, 100)), min_size=1, max_size=6),
       st.floats(0.01, 100))
def test_weighted_ap_scaling_and_bounds(items, c):
    per = {str(i): v for i, v in enumerate(items)}
    w = weighted_ap(per)
    aps = [a for a, _ in items]
    assert min(aps) - 1e-12 <= w <= max(aps) + 1e-12
    assert weighted_ap({k: (a, c * wt) for k, (a, wt) in per.items()}) == pytest.approx(w, abs=1e-12)


# -- miss rate ---------------------------------------------------------------------------

def _gt3():
    return [DetectionBox(0, 0, 10, 10, frame=f) for f in range(3)]


def test_miss_rate_curve_perfect_and_empty():
    gt = _gt3()
    perfect = [g.copy(score=0.9) for g in gt]
    assert miss_rate_curve(perfect, gt, 3) == [(0.0, 1.0), (0.0, 0.0)]
    assert miss_rate_curve([], gt, 3) == [(0.0, 1.0)]


def test_miss_rate_curve_toy():
    gt = _gt3()
    far = (50, 50, 60, 60)
    dets = [DetectionBox(0, 0, 10, 10, score=0.9, frame=0),
            DetectionBox(*far, score=0.8, frame=1),
            DetectionBox(0, 0, 10, 10, score=0.7, frame=1),
            DetectionBox(*far, score=0.6, frame=2)]
    curve = miss_rate_curve(dets, gt, 3)
    want = [(0, 1), (0, 2 / 3), (1 / 3, 2 / 3), (1 / 3, 1 / 3), (2 / 3, 1 / 3)]
    np.testing.assert_allclose(curve, want, atol=1e-12)


def test_miss_rate_curve_errors():
    with pytest.raises(InvalidInputError):
        miss_rate_curve([], [], 3)
    with pytest.raises(InvalidInputError):
        miss_rate_curve([], _gt3(), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_miss_rate_non_increasing(seed):
    r = np.random.default_rng(seed)
    gt = [DetectionBox(x, 0, x + 10, 10, frame=int(f)) for x, f in zip(r.uniform(0, 50, 6), r.integers(0, 3, 6))]
    dets = [DetectionBox(x, 0, x + 10, 10, score=float(s), frame=int(f))
            for x, s, f in zip(r.uniform(0, 50, 10), r.random(10), r.integers(0, 3, 10))]
    curve = miss_rate_curve(dets, gt, 3)
    fppi = [c[0] for c in curve]
    mr = [c[1] for c in curve]
    assert fppi == sorted(fppi)
    assert all(b <= a for a, b in zip(mr, mr[1:]))


def test_mmr_constant_and_perfect():
    assert log_average_miss_rate([(0.0, 0.5)]) == pytest.approx(50.0, abs=1e-12)
    assert log_average_miss_rate([(0.0, 1.0), (0.0, 0.0)]) == 0.0


def test_mmr_two_step_hand_evaluation():
    curve = [(0.0, 1.0), (0.05, 0.6), (2.0, 0.2)]
    samples = [0.01, 10 ** -1.5, 0.1, 10 ** -0.5, 1.0, 10 ** 0.5, 10.0, 10 ** 1.5, 100.0]
    # FPPI 0.05 is first reached at the third sample, 2.0 at the sixth
    hand = 100 * math.exp((2 * math.log(1.0) + 3 * math.log(0.6) + 4 * math.log(0.2)) / 9)
    assert log_average_miss_rate(curve) == pytest.approx(hand, abs=1e-9)
    picked = [1.0 if s < 0.05 else (0.6 if s < 2.0 else 0.2) for s in samples]
    assert log_average_miss_rate(curve) == pytest.approx(log_average(picked), abs=1e-9)


def test_mmr_errors():
    with pytest.raises(InvalidInputError):
        log_average_miss_rate([])
    with pytest.raises(InvalidInputError):
        log_average_miss_rate([(0, 1)], points=1)
