"""Delta/Gaussian sensor models, fixed-point accumulation, thresholding."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radargrid.classic_ism import (
    IsmConfig,
    LogOddsGrid,
    bayes_update,
    classify_grid,
    default_threshold_candidates,
    delta_ism_update,
    gaussian_ism_update,
    ism_update,
    logit,
    logodds_to_prob,
    tune_thresholds,
    tuned_config,
)
from radargrid.grid import FREE, OCCUPIED, UNOBSERVED, GridSpec, LabelGrid

from oracles import iou_oracle

COLUMN = GridSpec(5, 1, 1.0, 1.0, 0.0, -0.5)
ORIGIN = (0.0, 0.0)
CFG = IsmConfig()

L_HIT = logit(0.7)  # 0.8472978603872034
L_MISS = logit(0.4)  # -0.4054651081081645


def test_logit_hand_values():
    assert logit(0.5) == 0.0
    assert logit(0.7) == pytest.approx(0.8472978603872034, abs=1e-15)
    assert logit(0.4) == pytest.approx(-0.4054651081081645, abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        IsmConfig(kind="nope")
    with pytest.raises(ValueError):
        IsmConfig(p_hit=0.5)
    with pytest.raises(ValueError):
        IsmConfig(p_miss=0.6)
    with pytest.raises(ValueError):
        IsmConfig(sigma_range=0.0)
    with pytest.raises(ValueError):
        IsmConfig(t_occ=0.3, t_free=0.4)
    assert tuned_config(CFG, (0.9, 0.1)).t_occ == 0.9


# ---------------------------------------------------------------------------
# delta model


def test_delta_single_detection_hand_trace():
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[3.5, 0.0]]), CFG)
    expected = np.array([[L_MISS], [L_MISS], [L_MISS], [L_HIT], [0.0]])
    assert np.allclose(inc, expected, atol=1e-15)


def test_delta_no_detections_zero_grid():
    inc = delta_ism_update(COLUMN, ORIGIN, np.zeros((0, 2)), CFG)
    assert not inc.any()


def test_delta_out_of_grid_detection_ignored():
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[10.0, 0.0], [5.0, 0.0]]), CFG)
    assert not inc.any()


def test_delta_occluded_second_detection_contributes_nothing():
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[2.5, 0.0], [4.5, 0.0]]), CFG)
    expected = np.array([[L_MISS], [L_MISS], [L_HIT], [0.0], [0.0]])
    assert np.allclose(inc, expected, atol=1e-15)


def test_delta_two_detections_same_cell_both_kept():
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[2.3, 0.0], [2.7, 0.0]]), CFG)
    assert inc[2, 0] == pytest.approx(L_HIT)
    assert inc[3, 0] == 0.0


def test_delta_detection_in_origin_cell():
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[0.5, 0.0]]), CFG)
    assert inc[0, 0] == pytest.approx(L_HIT)
    assert not inc[1:].any()


def test_delta_touches_only_ray_cells():
    spec = GridSpec(12, 12, 0.5, 0.5, 0.0, -3.0)
    origin = (0.1, 0.07)  # strictly inside a cell, off every gridline
    rng = np.random.default_rng(4)
    for _ in range(10):
        det = np.array([[rng.uniform(0.5, 5.5), rng.uniform(-2.5, 2.5)]])
        inc = delta_ism_update(spec, origin, det, CFG)
        from radargrid.grid import traverse_ray

        ray = set(traverse_ray(spec, origin, tuple(det[0])))
        nz = {tuple(c) for c in np.argwhere(inc != 0.0)}
        assert nz == {(c.u, c.v) for c in ray}


def test_delta_hit_beats_free_on_overlap():
    # two rays: one ends where the other passes through
    dets = np.array([[2.5, 0.0], [2.5, 1.8]])
    spec = GridSpec(5, 3, 1.0, 1.0, 0.0, -1.5)
    inc = delta_ism_update(spec, (0.5, 0.0), dets, CFG)
    assert inc[2, 1] == pytest.approx(L_HIT)  # first detection's cell


# ---------------------------------------------------------------------------
# gaussian model


def test_gaussian_peak_equals_hit_logit():
    spec = GridSpec(21, 21, 0.5, 0.5, 0.0, -5.25)
    det = np.array([[5.25, 0.0]])
    inc = gaussian_ism_update(spec, ORIGIN, det, CFG)
    assert inc.max() == pytest.approx(L_HIT, abs=1e-12)
    u, v = np.unravel_index(np.argmax(inc), inc.shape)
    assert (u, v) == (10, 10)


def test_gaussian_azimuth_symmetry():
    spec = GridSpec(21, 21, 0.5, 0.5, 0.0, -5.25)
    inc = gaussian_ism_update(spec, ORIGIN, np.array([[5.25, 0.0]]), CFG)
    assert np.allclose(inc[:, :10], inc[:, :10:-1], atol=1e-12)


def test_gaussian_tiny_sigma_degenerates_to_delta():
    spec = GridSpec(21, 21, 0.5, 0.5, 0.0, -5.25)
    cfg = IsmConfig(kind="gaussian", sigma_range=1e-6, sigma_azimuth=1e-6)
    rng = np.random.default_rng(7)
    for _ in range(5):
        uv = rng.integers(0, 21, size=(4, 2))
        off = rng.uniform(0.2, 0.8, size=(4, 2))
        dets = np.column_stack(
            [(uv[:, 0] + off[:, 0]) * 0.5, -5.25 + (uv[:, 1] + off[:, 1]) * 0.5]
        )
        g = gaussian_ism_update(spec, (0.1, 0.05), dets, cfg)
        d = delta_ism_update(spec, (0.1, 0.05), dets, cfg)
        assert np.array_equal(g, d)


def test_gaussian_spreads_over_neighbors():
    spec = GridSpec(21, 21, 0.5, 0.5, 0.0, -5.25)
    cfg = IsmConfig(kind="gaussian", sigma_range=1.0, sigma_azimuth=math.radians(5))
    inc = gaussian_ism_update(spec, ORIGIN, np.array([[5.25, 0.0]]), cfg)
    assert (inc > 0).sum() > 1  # mass beyond the detection cell
    assert inc.max() <= L_HIT + 1e-12


def test_ism_update_dispatch():
    a = ism_update(COLUMN, ORIGIN, np.array([[2.5, 0.0]]), IsmConfig(kind="delta"))
    b = delta_ism_update(COLUMN, ORIGIN, np.array([[2.5, 0.0]]), CFG)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# accumulation


def test_bayes_update_adds_increment():
    acc = LogOddsGrid.zeros(COLUMN)
    inc = delta_ism_update(COLUMN, ORIGIN, np.array([[3.5, 0.0]]), CFG)
    bayes_update(acc, inc)
    bayes_update(acc, inc)
    assert acc.values[3, 0] == pytest.approx(2 * L_HIT, abs=1e-9)
    assert acc.values[0, 0] == pytest.approx(2 * L_MISS, abs=1e-9)
    assert acc.values[4, 0] == 0.0


def test_bayes_update_zero_increment_is_noop():
    acc = LogOddsGrid.zeros(COLUMN, l0=0.3)
    bayes_update(acc, np.zeros(COLUMN.shape))
    assert not acc.raw.any()


def test_bayes_update_subtracts_prior():
    acc = LogOddsGrid.zeros(COLUMN, l0=0.2)
    inc = np.zeros(COLUMN.shape)
    inc[1, 0] = 0.5
    bayes_update(acc, inc)
    assert acc.values[1, 0] == pytest.approx(0.3, abs=1e-9)


def test_bayes_update_shape_mismatch():
    with pytest.raises(ValueError):
        bayes_update(LogOddsGrid.zeros(COLUMN), np.zeros((4, 1)))


def test_accumulation_is_permutation_invariant_bitwise():
    spec = GridSpec(16, 12, 0.5, 0.5, 0.0, -3.0)
    rng = np.random.default_rng(21)
    incs = []
    for i in range(10):
        dets = np.column_stack([rng.uniform(0.3, 7.5, 6), rng.uniform(-2.8, 2.8, 6)])
        cfg = IsmConfig(kind="delta" if i % 2 == 0 else "gaussian")
        incs.append(ism_update(spec, (0.1, 0.0), dets, cfg))
    forward = LogOddsGrid.zeros(spec)
    for inc in incs:
        bayes_update(forward, inc)
    shuffled = LogOddsGrid.zeros(spec)
    for j in rng.permutation(10):
        bayes_update(shuffled, incs[j])
    assert np.array_equal(forward.raw, shuffled.raw)
    assert forward.raw.any()


# ---------------------------------------------------------------------------
# readout


def test_logodds_to_prob_values():
    assert logodds_to_prob(np.array(0.0)) == pytest.approx(0.5)
    assert logodds_to_prob(np.array(math.log(3.0))) == pytest.approx(0.75, abs=1e-12)
    assert logodds_to_prob(np.array(-math.log(3.0))) == pytest.approx(0.25, abs=1e-12)


def test_logodds_to_prob_clamps_at_l_max():
    assert logodds_to_prob(np.array(100.0)) == logodds_to_prob(np.array(8.0))
    assert logodds_to_prob(np.array(-100.0)) == logodds_to_prob(np.array(-8.0))
    assert logodds_to_prob(np.array(100.0), l_max=2.0) == logodds_to_prob(np.array(2.0))


def test_classify_hand_values():
    spec = GridSpec(1, 4, 1.0, 1.0)
    probs = np.array([[0.1, 0.5, 0.65, 0.35]])
    lab = classify_grid(spec, probs, 0.65, 0.35)
    assert lab.cells[0].tolist() == [FREE, UNOBSERVED, OCCUPIED, FREE]


def test_classify_validation():
    spec = GridSpec(1, 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        classify_grid(spec, np.zeros((1, 2)), 0.3, 0.4)
    with pytest.raises(ValueError):
        classify_grid(spec, np.zeros((2, 2)), 0.65, 0.35)


@given(seed=st.integers(0, 5000))
@settings(max_examples=40, deadline=None)
def test_classify_monotone_in_probability(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(4, 4, 1.0, 1.0)
    p1 = rng.random(spec.shape)
    p2 = np.clip(p1 + rng.random(spec.shape) * 0.3, 0.0, 1.0)
    rank = {FREE: 0, UNOBSERVED: 1, OCCUPIED: 2}
    r1 = np.vectorize(rank.get)(classify_grid(spec, p1, 0.65, 0.35).cells)
    r2 = np.vectorize(rank.get)(classify_grid(spec, p2, 0.65, 0.35).cells)
    assert (r2 >= r1).all()


# ---------------------------------------------------------------------------
# threshold tuning


def test_tune_finds_perfect_candidate():
    spec = GridSpec(2, 2, 1.0, 1.0)
    gt = LabelGrid(
        spec, np.array([[FREE, OCCUPIED], [UNOBSERVED, UNOBSERVED]], dtype=np.uint8)
    )
    # only (0.65, 0.35) classifies all four cells correctly
    probs = np.array([[0.1, 0.9], [0.6, 0.4]])
    t_occ, t_free = tune_thresholds([probs], [gt], [(0.95, 0.05), (0.65, 0.35), (0.55, 0.45)])
    assert (t_occ, t_free) == (0.65, 0.35)


def test_tune_tie_breaks_small_occ_then_large_free():
    spec = GridSpec(2, 2, 1.0, 1.0)
    gt = LabelGrid.full(spec, UNOBSERVED)
    probs = np.full(spec.shape, 0.5)
    t_occ, t_free = tune_thresholds([probs], [gt], default_threshold_candidates())
    assert (t_occ, t_free) == (0.55, 0.45)


def test_tune_matches_brute_force_oracle():
    rng = np.random.default_rng(17)
    spec = GridSpec(6, 6, 1.0, 1.0, 0.0, -3.0)
    cands = default_threshold_candidates()
    for _ in range(5):
        probs = [rng.random(spec.shape) for _ in range(3)]
        gts = [
            LabelGrid(spec, rng.integers(0, 3, spec.shape).astype(np.uint8)) for _ in range(3)
        ]
        got = tune_thresholds(probs, gts, cands)

        best_key, best = None, None
        for t_occ, t_free in cands:
            inter = np.zeros(3)
            union = np.zeros(3)
            for p, g in zip(probs, gts):
                pred = classify_grid(spec, p, t_occ, t_free).cells
                for c in (FREE, OCCUPIED, UNOBSERVED):
                    inter[c] += np.sum((pred == c) & (g.cells == c))
                    union[c] += np.sum((pred == c) | (g.cells == c))
            ious = [i / u if u > 0 else 1.0 for i, u in zip(inter, union)]
            key = (float(np.mean(ious)), -t_occ, t_free)
            if best_key is None or key > best_key:
                best_key, best = key, (t_occ, t_free)
        assert got == best


def test_tune_validation_errors():
    spec = GridSpec(1, 1, 1.0, 1.0)
    gt = LabelGrid.full(spec, FREE)
    with pytest.raises(ValueError):
        tune_thresholds([], [], [(0.6, 0.4)])
    with pytest.raises(ValueError):
        tune_thresholds([np.zeros((1, 1))], [], [(0.6, 0.4)])
    with pytest.raises(ValueError):
        tune_thresholds([np.zeros((1, 1))], [gt], [])
    with pytest.raises(ValueError):
        tune_thresholds([np.zeros((1, 1))], [gt], [(0.3, 0.6)])


def test_default_candidates_keep_prior_unobserved():
    for t_occ, t_free in default_threshold_candidates():
        assert t_free < 0.5 < t_occ
