import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from psychocnn.psychometrics import HumanBaseline
from psychocnn.stats import (DEGENERATE_MARK, ComparisonRow, bonferroni, build_table,
                             format_p, one_sample_t, t_sf_two_tailed)

PUBLISHED = HumanBaseline.from_summary(0.532, 0.018, 50)


def test_published_vgg11_object_row():
    t, df, _ = one_sample_t(PUBLISHED, 0.701)
    assert df == 49
    assert t == pytest.approx(9.389, abs=1e-3)
    assert abs(t - 9.320) <= 0.07


def test_published_vgg13_object_row():
    t, _, _ = one_sample_t(PUBLISHED, 0.494)
    assert t == pytest.approx(-2.111, abs=1e-3)


def test_centered_model():
    t, df, p = one_sample_t(PUBLISHED, 0.532)
    assert t == 0 and p == 1.0


def test_zero_spread_baseline_is_extreme():
    b = HumanBaseline.from_pses([0.5, 0.5])
    assert b.sd == 0 and b.sem == 0
    t, df, p = one_sample_t(b, 0.6)
    assert t == math.inf and p == 0.0
    t, _, p = one_sample_t(b, 0.4)
    assert t == -math.inf and p == 0.0
    assert one_sample_t(b, 0.5) == (0.0, 1, 1.0)


def test_rejects_small_baseline():
    with pytest.raises(ValueError):
        HumanBaseline([0.5], 1, 0.5, 0.0, 0.0)


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, 2.5, 10.0, 300.0])
def test_df1_arctan_closed_form(t):
    assert t_sf_two_tailed(t, 1) == pytest.approx(1 - 2 / math.pi * math.atan(abs(t)), abs=1e-9)


@pytest.mark.parametrize("t", [0.3, 1.7, 4.0, 25.0])
def test_df2_closed_form(t):
    assert t_sf_two_tailed(t, 2) == pytest.approx(1 - abs(t) / math.sqrt(t * t + 2), abs=1e-12)


@pytest.mark.parametrize("df", [1, 3, 10, 49, 200])
@pytest.mark.parametrize("t", [-6.0, -1.2, 0.4, 2.0, 9.3])
def test_matches_scipy_student_t(t, df):
    assert t_sf_two_tailed(t, df) == pytest.approx(2 * sps.t.sf(abs(t), df), rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("p,m,expected", [(0.01, 5, 0.05), (0.4, 10, 1.0), (0.0, 7, 0.0)])
def test_bonferroni_examples(p, m, expected):
    assert bonferroni(p, m) == pytest.approx(expected)


def test_bonferroni_rejects_bad_input():
    with pytest.raises(ValueError):
        bonferroni(1.2, 3)
    with pytest.raises(ValueError):
        bonferroni(0.5, 0)


@given(st.floats(0, 1), st.integers(1, 1000))
def test_bonferroni_ordering(p, m):
    pc = bonferroni(p, m)
    assert p <= pc <= 1.0
    if pc == p:
        assert m == 1 or p == 0 or p == 1.0


@given(st.floats(-0.5, 0.5))
@settings(max_examples=200)
def test_t_antisymmetry(offset):
    t1, _, p1 = one_sample_t(PUBLISHED, PUBLISHED.mean + offset)
    t2, _, p2 = one_sample_t(PUBLISHED, PUBLISHED.mean - offset)
    assert t1 == pytest.approx(-t2, abs=1e-9)
    assert p1 == pytest.approx(p2, rel=1e-9, abs=1e-300)


def test_t_and_p_monotone_in_distance():
    d = np.linspace(0.0, 0.3, 40)
    ts = [abs(one_sample_t(PUBLISHED, PUBLISHED.mean + x)[0]) for x in d]
    ps = [one_sample_t(PUBLISHED, PUBLISHED.mean + x)[2] for x in d]
    assert all(b > a for a, b in zip(ts, ts[1:]))
    # p underflows towards 0 for huge |t|; strictness holds while representable
    live = [p for p in ps if p > 1e-300]
    assert all(b < a for a, b in zip(live, live[1:]))


def test_format_p():
    assert format_p(0.0004) == "<.001"
    assert format_p(0.001) == "0.001"
    assert format_p(0.875) == "0.875"
    assert format_p(None) == DEGENERATE_MARK


def _row(model, pse, strategy="object_based", condition="unmasked"):
    return ComparisonRow.compare(strategy, condition, model, pse, PUBLISHED)


def test_degenerate_rows_carry_nothing():
    r = _row("alexnet", None)
    assert r.degenerate and r.t is None and r.p is None and r.df == 49
    with pytest.raises(ValueError):
        ComparisonRow("object_based", "unmasked", "alexnet", None, 1.0, 49, degenerate=True)


def test_default_m_counts_live_rows():
    rows = [_row("alexnet", None), _row("vgg11", 0.6), _row("vgg13", 0.55)]
    rep = build_table(rows)
    assert rep.m == 2
    assert rep.rows[1].p_corrected == pytest.approx(min(1.0, 2 * rows[1].p))
    assert rep.rows[0].p_corrected is None


def test_single_live_row_uncorrected():
    rep = build_table([_row("vgg11", 0.55)])
    assert rep.m == 1
    assert rep.rows[0].p_corrected == rep.rows[0].p


def test_m_override():
    rep = build_table([_row("vgg11", 0.55)], m=10)
    assert rep.rows[0].p_corrected == pytest.approx(min(1.0, 10 * rep.rows[0].p))


def test_all_degenerate_table():
    rows = [_row(m, None) for m in ("alexnet", "vgg11")]
    rep = build_table(rows)
    text = rep.to_text()
    body = [ln for ln in text.splitlines() if "AlexNet" in ln or "VGG11" in ln]
    assert all(ln.count(DEGENERATE_MARK) == 3 for ln in body)
    assert "<.001" not in text


def test_json_report_is_stable_and_complete():
    rows = [_row("alexnet", None), _row("vgg11", 0.701)]
    a = build_table(rows).to_json(seed=1)
    b = build_table(rows).to_json(seed=1)
    assert a == b
    doc = json.loads(a)
    assert doc["bonferroni_m"] == 1
    assert doc["rows"][0]["degenerate"] is True
    assert doc["rows"][1]["t"] == pytest.approx(9.38888888, abs=1e-6)


def test_table1_shape():
    pses = {"object_based": [None, 0.701, 0.494, 0.703, 0.501],
            "face_based": [0.670, 0.714, 0.715, 0.622, 0.663]}
    models = ["alexnet", "vgg11", "vgg13", "vgg16", "fe_alexnet"]
    rows = [_row(m, p, s) for s, ps in pses.items() for m, p in zip(models, ps)]
    rep = build_table(rows)
    assert len(rep.rows) == 10
    assert sum(r.degenerate for r in rep.rows) == 1
    assert rep.rows[0].model == "alexnet" and rep.rows[0].degenerate


# printed t, per-table count of non-degenerate rows, printed corrected p
PUBLISHED_P = [(-1.691, 9, 0.875), (4.050, 7, 0.001), (-0.011, 7, 1.000),
               (2.912, 13, 0.070), (-3.006, 13, 0.054)]


@pytest.mark.parametrize("t,m,printed", PUBLISHED_P)
def test_published_corrected_p_values(t, m, printed):
    # the default family size reproduces the printed p-values from the printed t
    assert round(bonferroni(t_sf_two_tailed(t, 49), m), 3) == printed


def test_published_vgg13_p_is_not_reproducible():
    # printed as <.001; no standard correction gets there from t(49) = -2.116
    assert t_sf_two_tailed(-2.116, 49) > 0.03
