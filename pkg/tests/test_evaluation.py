from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_ap, oracle_match, oracle_round

from touchspot.core import EventDetection, SpotError
from touchspot.evaluation import (
    ap_from_ranked,
    average_precision,
    evaluate_videos,
    format_table,
    map_over_tolerances,
    match_predictions,
    round_frame,
)


def D(frame, conf):
    return EventDetection(float(frame), conf)


@pytest.mark.parametrize("delta,expected", [(0, 0.0), (1, 1.0), (2, 1.0)])
def test_one_frame_off(delta, expected):
    assert average_precision([D(11, 0.9)], [10], delta) == expected


def test_second_prediction_on_same_gt_is_fp():
    r = match_predictions([D(10, 0.9), D(10, 0.8)], [10], 0)
    assert r.tp == (True, False)
    assert average_precision([D(10, 0.9), D(10, 0.8)], [10], 0) == 1.0


def test_worked_ap_example():
    # ranks: TP, FP, TP with 2 GTs -> 1/2 * (1 + 2/3)
    preds = [D(5, 0.9), D(20, 0.8), D(30, 0.7)]
    assert average_precision(preds, [5, 30], 0) == pytest.approx(5 / 6, abs=1e-15)


def test_no_predictions_scores_zero():
    assert average_precision([], [3, 8], 2) == 0.0


def test_no_ground_truth_is_an_error():
    with pytest.raises(SpotError):
        average_precision([D(1, 0.5)], [], 1)
    with pytest.raises(SpotError):
        ap_from_ranked([True], 0)


def test_nearest_gt_wins_and_ties_go_earlier():
    r = match_predictions([D(10, 0.9)], [8, 11], 2)
    assert r.gt_matched == (False, True)
    r = match_predictions([D(10, 0.9)], [9, 11], 1)
    assert r.gt_matched == (True, False)


def test_confidence_ties_processed_in_frame_order():
    r = match_predictions([D(12, 0.5), D(10, 0.5)], [11], 1)
    assert r.order == (1, 0) and r.tp == (True, False)


def test_fractional_rounding_halves_down():
    assert round_frame(10.5) == 10 and round_frame(10.51) == 11 and round_frame(9.49) == 9
    assert average_precision([D(10.5, 0.9)], [10], 0) == 1.0


def test_map_is_mean_of_tolerance_aps():
    preds = [D(12, 0.8), D(31, 0.9)]
    m, per = map_over_tolerances(preds, [10, 30], (0, 1, 2))
    assert per == {0: 0.0, 1: 0.5, 2: 1.0}
    assert m == pytest.approx(0.5)


def test_pooled_evaluation_across_videos():
    preds = {"a": [D(3, 0.9)], "b": [D(50, 0.8), D(7, 0.7)]}
    gts = {"a": [3], "b": [7], "c": [4]}
    m, per = evaluate_videos(preds, gts, (0,))
    # ranked TP, FP, TP over 3 GTs
    assert per[0] == pytest.approx((1 + 2 / 3) / 3)
    m_pv, per_pv = evaluate_videos(preds, gts, (0,), per_video=True)
    assert per_pv[0] == pytest.approx((1 + 0.5 + 0) / 3)


def test_unknown_video_in_predictions():
    with pytest.raises(SpotError):
        evaluate_videos({"zz": [D(1, 0.5)]}, {"a": [1]})


def test_format_table():
    text = format_table({"x": (0.5, {0: 0.25, 1: 0.5, 2: 0.75})})
    assert text.splitlines() == ["\tmAP\tδ=0\tδ=1\tδ=2", "x\t50.00\t25.00\t50.00\t75.00"]


# -- oracle agreement and properties

frames_st = st.integers(0, 25)
conf_st = st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 1.0])
pred_st = st.lists(st.tuples(st.one_of(frames_st, frames_st.map(lambda f: f + 0.5)), conf_st), max_size=12)
gt_st = st.lists(frames_st, min_size=1, max_size=8)


@settings(max_examples=300)
@given(pred_st, gt_st, st.integers(0, 2))
def test_matches_brute_force_oracle(preds, gts, delta):
    dets = [D(f, c) for f, c in preds]
    r = match_predictions(dets, gts, delta)
    flags = oracle_match(preds, gts, delta)
    assert list(r.tp) == flags
    assert average_precision(dets, gts, delta) == pytest.approx(float(oracle_ap(flags, len(gts))), abs=1e-12)


@given(st.floats(0, 30, allow_nan=False))
def test_rounding_matches_oracle(x):
    assert round_frame(x) == oracle_round(x)


@given(pred_st, gt_st, st.integers(0, 2), st.randoms())
def test_prediction_order_irrelevant(preds, gts, delta, rnd):
    dets = [D(f, c) for f, c in preds]
    shuffled = dets[:]
    rnd.shuffle(shuffled)
    assert average_precision(dets, gts, delta) == average_precision(shuffled, gts, delta)


@given(pred_st, gt_st, st.integers(0, 2))
def test_confidence_scaling_irrelevant(preds, gts, delta):
    dets = [D(f, c) for f, c in preds]
    scaled = [D(f, c * 0.5) for f, c in preds]
    assert average_precision(dets, gts, delta) == average_precision(scaled, gts, delta)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=6, unique=True), st.data())
def test_monotone_in_delta_without_contention(slots, data):
    # GTs 10 apart and one prediction per GT, so no prediction can reach two GTs
    gts = [10 * s + 5 for s in slots]
    preds = [D(g + data.draw(st.integers(-3, 3)), data.draw(conf_st)) for g in gts]
    aps = [average_precision(preds, gts, d) for d in range(4)]
    assert all(a <= b for a, b in zip(aps, aps[1:]))


@given(pred_st, gt_st, st.integers(0, 2))
def test_ap_in_unit_interval(preds, gts, delta):
    ap = average_precision([D(f, c) for f, c in preds], gts, delta)
    assert 0.0 <= ap <= 1.0


def test_oracle_ap_worked_example():
    assert oracle_ap([True, False, True], 2) == Fraction(5, 6)
