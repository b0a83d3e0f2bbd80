import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dacl.errors import ContractError, UndefinedMetricError
from dacl.metrics import EvalReport, aggregate_runs, asd, boundary, dice_jaccard, evaluate


def brute_asd(p, g):
    """Exhaustive nearest-boundary distances with an explicit neighbor test."""
    def edge(m):
        h, w = m.shape
        pts = []
        for y in range(h):
            for x in range(w):
                if not m[y, x]:
                    continue
                nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                if any(not (0 <= a < h and 0 <= b < w) or not m[a, b] for a, b in nbrs):
                    pts.append((y, x))
        return pts

    bp, bg = edge(p), edge(g)
    dists = [min(math.sqrt((a - c) ** 2 + (b - d) ** 2) for c, d in bg) for a, b in bp]
    dists += [min(math.sqrt((a - c) ** 2 + (b - d) ** 2) for c, d in bp) for a, b in bg]
    return math.fsum(dists) / len(dists)


def test_dice_jaccard_example():
    p = np.array([[1, 1, 0, 0]])
    g = np.array([[0, 1, 1, 0]])
    dj = dice_jaccard(p, g, 1)
    assert dj["dice"] == pytest.approx(50.0)
    assert dj["jaccard"] == pytest.approx(100 / 3)


def test_empty_conventions():
    z = np.zeros((3, 3), dtype=int)
    o = np.ones((3, 3), dtype=int)
    assert dice_jaccard(z, z, 1) == {"dice": 100.0, "jaccard": 100.0}
    assert dice_jaccard(o, z, 1) == {"dice": 0.0, "jaccard": 0.0}
    with pytest.raises(UndefinedMetricError):
        asd(o, z, 1)


def test_shape_mismatch():
    with pytest.raises(ContractError):
        dice_jaccard(np.zeros((2, 2)), np.zeros((3, 3)), 1)


def test_asd_single_pixels_three_apart():
    p = np.zeros((5, 5), dtype=int)
    g = np.zeros((5, 5), dtype=int)
    p[2, 0] = 1
    g[2, 3] = 1
    assert asd(p, g, 1) == 3.0


def test_identical_masks_have_zero_asd():
    m = np.zeros((6, 6), dtype=int)
    m[1:5, 2:4] = 1
    assert asd(m, m, 1) == 0.0


def test_boundary_counts_image_edge_as_outside():
    m = np.ones((3, 3), dtype=bool)
    b = boundary(m)
    assert b.sum() == 8 and not b[1, 1]


@given(st.integers(0, 2**32 - 1), st.integers(3, 12))
def test_jaccard_dice_identity_and_asd_oracle(seed, size):
    r = np.random.default_rng(seed)
    p = (r.random((size, size)) < r.uniform(0.05, 0.7)).astype(int)
    g = (r.random((size, size)) < r.uniform(0.05, 0.7)).astype(int)
    dj = dice_jaccard(p, g, 1)
    d = dj["dice"] / 100
    assert abs(dj["jaccard"] / 100 - d / (2 - d)) < 1e-12
    if p.any() and g.any():
        assert asd(p, g, 1) == brute_asd(p.astype(bool), g.astype(bool))


def test_evaluate_macro_averages_foreground_only():
    gt = np.array([[0, 1], [2, 2]])
    pred = np.array([[0, 1], [2, 0]])
    rep = evaluate([pred], [gt], 3)
    assert rep.per_class[1]["dice"] == 100.0
    assert rep.per_class[2]["dice"] == pytest.approx(200 / 3)
    assert rep.macro["dice"] == pytest.approx((100 + 200 / 3) / 2)
    assert 0 not in rep.per_class


def test_undefined_asd_is_counted_not_averaged():
    gt = np.array([[1, 0], [0, 0]])
    pred = np.zeros((2, 2), dtype=int)
    rep = evaluate([pred, gt], [gt, gt], 2)
    assert rep.undefined_asd[1] == 1
    assert rep.per_class[1]["asd"] == 0.0


def test_aggregate_mean_and_sample_std():
    reps = [EvalReport(macro={"dice": v}) for v in (88.0, 90.0, 92.0)]
    agg = aggregate_runs(reps)
    assert agg["dice"]["mean"] == 90.0
    assert agg["dice"]["std"] == pytest.approx(2.0)


def test_report_json_is_canonical():
    rep = EvalReport(per_class={2: {"dice": 1.0}, 1: {"dice": 2.0}}, macro={"dice": 1.5}, n_cases=1)
    assert rep.to_json() == EvalReport(**vars(rep)).to_json()
    assert rep.to_json().index('"1"') < rep.to_json().index('"2"')
