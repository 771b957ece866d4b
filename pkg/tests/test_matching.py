from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmatch.assignment import brute_force
from hybridmatch.errors import CapacityError, ConfigError, InvalidGeometryError
from hybridmatch.geometry import Box, giou, l1_scalar, to_corners
from hybridmatch.matching import (
    GroundTruthSet,
    HybridConfig,
    LayerPredictions,
    MatchWeights,
    build_cost_matrix,
    focal_class_cost,
    match_one2many,
    match_one2one,
    one2many_epochs,
    positive_supervision_count,
    repeat_targets,
    uses_one2many_epoch,
)
from hybridmatch.verify import random_predictions, random_truth


def two_boxes():
    return GroundTruthSet([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], [0, 2], 3)


def test_ground_truth_validation():
    with pytest.raises(InvalidGeometryError):
        GroundTruthSet([[0.5, 0.5, 0.1, 0.1]], [0, 1])
    with pytest.raises(InvalidGeometryError):
        GroundTruthSet([[0.5, 0.5, 0.0, 0.1]], [0])
    with pytest.raises(InvalidGeometryError):
        GroundTruthSet([[0.5, 0.5, 0.1, 0.1]], [3], num_classes=3)
    assert GroundTruthSet(np.zeros((0, 4)), []).m == 0


def test_repeat_targets_identity_and_layout():
    g = two_boxes()
    r1 = repeat_targets(g, 1)
    assert np.array_equal(r1.boxes, g.boxes) and np.array_equal(r1.labels, g.labels)
    r6 = repeat_targets(g, 6)
    assert len(r6) == 12
    for k in range(6):
        assert np.array_equal(r6.boxes[2 * k:2 * k + 2], g.boxes)
        assert np.array_equal(r6.labels[2 * k:2 * k + 2], g.labels)
    assert r6.source_index.tolist() == [0, 1] * 6


def test_repeat_targets_empty_cases():
    assert len(repeat_targets(GroundTruthSet(np.zeros((0, 4)), []), 5)) == 0
    assert len(repeat_targets(two_boxes(), 0)) == 0
    with pytest.raises(ConfigError):
        repeat_targets(two_boxes(), -1)


def test_focal_cost_formula():
    p = np.array([[0.3, 0.9]])
    a, gm = 0.25, 2.0
    want = a * (1 - p) ** gm * -np.log(p) - (1 - a) * p**gm * -np.log(1 - p)
    np.testing.assert_allclose(focal_class_cost(p, a, gm), want, rtol=0, atol=1e-15)


def test_cost_clamps_extreme_probabilities():
    p = LayerPredictions([[0.0, 1.0]], [[0.5, 0.5, 0.2, 0.2]])
    g = GroundTruthSet([[0.5, 0.5, 0.2, 0.2], [0.4, 0.4, 0.2, 0.2]], [0, 1])
    assert np.all(np.isfinite(build_cost_matrix(p, g)))


def test_cost_perfect_prediction_geometric_terms_vanish():
    g = GroundTruthSet([[0.4, 0.5, 0.2, 0.3]], [1], 2)
    p = LayerPredictions([[0.0, 1.0]], g.boxes)
    w = MatchWeights()
    c = build_cost_matrix(p, g, w)
    cls_only = w.w_cls * focal_class_cost(p.class_scores, w.focal_alpha, w.focal_gamma)[0, 1]
    assert c[0, 0] == pytest.approx(cls_only, abs=1e-15)


def test_cost_hand_computed_two_by_two():
    # query 0 sits on target 0, query 1 on target 1, equal class scores
    g = GroundTruthSet([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]], [0, 0], 1)
    p = LayerPredictions([[0.5], [0.5]], [[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]])
    c = build_cost_matrix(p, g)
    cls = 2.0 * (0.25 * 0.25 * np.log(2) - 0.75 * 0.25 * np.log(2))
    # L1 of the off-diagonal pairs: |0.5| + |0.5|; boxes disjoint, enclosing 0.7 x 0.7
    g_off = 0 - (0.49 - 0.08) / 0.49
    np.testing.assert_allclose(np.diag(c), [cls, cls], atol=1e-14)
    np.testing.assert_allclose(c[0, 1], cls + 5.0 * 1.0 + 2.0 * (1 - g_off), atol=1e-14)
    assert c[0, 1] == c[1, 0]
    assert match_one2one(p, g).pairs == [(0, 0), (1, 1)]


def test_cost_without_class_weight_is_geometric_nearest():
    rng = np.random.default_rng(0)
    w = MatchWeights(w_cls=0.0)
    for _ in range(20):
        g = random_truth(rng, 5, 3)
        p = random_predictions(rng, 7, 3)
        c = build_cost_matrix(p, g, w)
        for i, pb in enumerate(p.boxes):
            scalar = [5 * l1_scalar(Box(*pb), Box(*tb)) + 2 * (1 - giou(to_corners(Box(*pb)), to_corners(Box(*tb))))
                      for tb in g.boxes]
            assert int(np.argmin(c[i])) == int(np.argmin(scalar))


def test_cost_empty_targets():
    p = random_predictions(np.random.default_rng(1), 4, 3)
    assert build_cost_matrix(p, GroundTruthSet(np.zeros((0, 4)), [])).shape == (4, 0)


def test_match_one2one_sizes():
    rng = np.random.default_rng(2)
    assert len(match_one2one(random_predictions(rng, 5, 3), GroundTruthSet(np.zeros((0, 4)), []))) == 0
    a = match_one2one(random_predictions(rng, 300, 5), random_truth(rng, 25, 5))
    assert len(a) == 25 and sorted(a.cols.tolist()) == list(range(25))
    assert len(set(a.rows.tolist())) == 25


def test_match_one2one_capacity():
    rng = np.random.default_rng(3)
    with pytest.raises(CapacityError):
        match_one2one(random_predictions(rng, 2, 3), random_truth(rng, 3, 3))


def test_match_one2one_optimal_vs_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = int(rng.integers(1, 8))
        p = random_predictions(rng, int(rng.integers(m, 10)), 4)
        g = random_truth(rng, m, 4)
        assert match_one2one(p, g).total_cost == brute_force(build_cost_matrix(p, g)).total_cost


def test_match_one2many_k1_equals_one2one():
    rng = np.random.default_rng(5)
    for _ in range(20):
        g = random_truth(rng, 4, 3)
        p = random_predictions(rng, 10, 3)
        assert match_one2many(p, repeat_targets(g, 1)).pairs == match_one2one(p, g).pairs


def test_match_one2many_full_scale():
    rng = np.random.default_rng(6)
    rep = repeat_targets(random_truth(rng, 10, 5), 6)
    a = match_one2many(random_predictions(rng, 1500, 5), rep)
    assert len(a) == 60
    assert np.bincount(rep.source_index[a.cols]).tolist() == [6] * 10
    assert len(set(a.rows.tolist())) == 60


def test_match_one2many_capacity():
    rng = np.random.default_rng(7)
    with pytest.raises(CapacityError):
        match_one2many(random_predictions(rng, 5, 3), repeat_targets(random_truth(rng, 2, 3), 3))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_one2many_multiplicity_matches_brute_force(K, m, extra, seed):
    if K * m > 8:
        return
    rng = np.random.default_rng(seed)
    T = min(K * m + extra, 8)
    rep = repeat_targets(random_truth(rng, m, 3), K)
    p = random_predictions(rng, T, 3)
    a = match_one2many(p, rep)
    assert np.bincount(rep.source_index[a.cols], minlength=m).tolist() == [K] * m
    assert a.total_cost == pytest.approx(brute_force(build_cost_matrix(p, rep)).total_cost, abs=1e-12)


def test_config_defaults_are_full_scale_settings():
    c = HybridConfig(scheme="hybrid_branch")
    assert (c.n, c.T, c.K, c.lam, c.L) == (300, 1500, 6, 1.0, 6)
    assert (c.K_epoch, c.K_layer, c.L1, c.L2, c.M, c.N) == (10, 10, 4, 2, 1800, 1800)


@pytest.mark.parametrize("kw", [dict(scheme="nope"), dict(rho=1.5), dict(lam=-1), dict(K=-1),
                                dict(scheme="hybrid_layer", L=6, L1=3, L2=2), dict(sharing="encoder")])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        HybridConfig(**kw)


def test_query_group_sizes():
    assert HybridConfig(scheme="hybrid_branch").one2many_queries == 1500
    assert HybridConfig(scheme="baseline").one2many_queries == 0
    assert HybridConfig(scheme="hybrid_epoch").one2one_queries == 1800


@pytest.mark.parametrize("kw", [
    dict(scheme="hybrid_branch", K=6),
    dict(scheme="hybrid_epoch", K_epoch=10, rho=2 / 3),
    dict(scheme="hybrid_epoch", K_epoch=10, rho="2/3"),
    dict(scheme="hybrid_layer", K_layer=10, L1=4, L2=2),
])
def test_positive_counts_full_scale(kw):
    got = positive_supervision_count(HybridConfig(L=6, **kw), 12)
    assert got == 504 and type(got) is int


def test_positive_count_baseline_and_fraction():
    assert positive_supervision_count(HybridConfig(scheme="baseline", L=6), 12) == 72
    got = positive_supervision_count(HybridConfig(scheme="hybrid_epoch", rho="1/3", K_epoch=2, L=1), 1)
    assert got == Fraction(4, 3)


def test_epoch_switch_boundary():
    cfg = HybridConfig(scheme="hybrid_epoch", rho="2/3", L=6)
    assert [uses_one2many_epoch(cfg, e, 12) for e in range(12)] == [True] * 8 + [False] * 4
    for total in range(1, 40):
        s = one2many_epochs("2/3", total)
        assert uses_one2many_epoch(cfg, s - 1, total) and not uses_one2many_epoch(cfg, s, total)
    assert one2many_epochs(0, 12) == 0 and one2many_epochs(1, 12) == 12
