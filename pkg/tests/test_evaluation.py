import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpbank.errors import ContractError, UndefinedMetricError
from kpbank.evaluation import EvalRecord, evaluate, pck_correct


def test_threshold_is_strict():
    # 0.1 * max(100, 50) = 10
    assert not pck_correct((10.0, 0.0), (0.0, 0.0), 100, 50)
    assert pck_correct((9.999, 0.0), (0.0, 0.0), 100, 50)
    assert not pck_correct((6.0, 8.0), (0.0, 0.0), 50, 100)


def test_bbox_must_be_positive():
    with pytest.raises(ContractError):
        pck_correct((0, 0), (0, 0), 0, 10)
    with pytest.raises(ContractError):
        EvalRecord("x", 0, [(0, 0)], [(0, 0)], [True], (10, 0))


def test_pooled_counts():
    recs = [
        EvalRecord("a", 0, [(0, 0), (50, 0)], [(0, 0), (0, 0)], [True, True], (100, 100)),
        EvalRecord("b", 2, [(0, 0), (0, 0)], [(0, 1), (99, 99)], [True, False], (100, 100)),
    ]
    report = evaluate(recs)
    assert (report.overall.visible, report.overall.correct) == (3, 2)
    assert report.pck == pytest.approx(2 / 3)
    assert report.level_pck(0) == 0.5 and report.level_pck(2) == 1.0
    assert report.per_level[1].visible == 0 and report.per_level[3].visible == 0
    assert report.per_keypoint[1].visible == 1


def test_no_visible_keypoints_undefined():
    with pytest.raises(UndefinedMetricError):
        evaluate([EvalRecord("a", 0, [(0, 0)], [(0, 0)], [False], (10, 10))])
    with pytest.raises(UndefinedMetricError):
        evaluate([])


def test_csv_layout():
    report = evaluate([EvalRecord("a", 1, [(0, 0)], [(0, 0)], [True], (10, 10))])
    lines = report.to_csv().splitlines()
    assert lines[0] == "level,n_visible,n_correct,PCK"
    assert lines[1] == "all,1,1,1.000000"
    assert lines[3] == "Lv.1,1,1,1.000000"
    assert "Lv.0,0,0,nan" in lines


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1, 100), st.floats(1, 100))
def test_matches_definition(dx, dy, h, w):
    dist = math.hypot(dx, dy)
    assert pck_correct((dx, dy), (0.0, 0.0), h, w) == (dist < 0.1 * max(h, w))
