import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctoken import metrics as M


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def random_auc_instance(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties actually occur
    scores = rng.integers(0, 20, n) / 20.0
    return scores, labels


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = random_auc_instance(rng)
        assert M.auc(s, y) == auc_oracle(s, y)


def test_auc_examples():
    assert M.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.auc([0.3] * 4, [0, 1, 0, 1]) == 0.5
    assert M.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert M.auc([0.1, 0.2], [1, 1]) is None


def test_macro_auc_skips_undefined():
    scores = np.array([[0.9, 0.1], [0.2, 0.3], [0.8, 0.5]])
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    mean, per = M.macro_auc(scores, labels)
    assert per[1] is None and mean == 1.0


def test_multilabel_stats_examples():
    acc, f1, _ = M.multilabel_stats(np.array([[0.9], [0.2]]), np.array([[1], [1]]))
    assert acc == 0.5 and f1 == pytest.approx(2 / 3)
    y = np.array([[1, 0], [0, 1]])
    assert M.multilabel_stats(y.astype(float), y)[:2] == (1.0, 1.0)
    eps = 1e-6
    assert M.multilabel_stats(np.full((3, 2), 0.5 - eps), np.zeros((3, 2), int))[0] == 1.0
    # positives present but never predicted -> 0; nothing to find -> 1
    _, _, per = M.multilabel_stats(np.array([[0.1, 0.1]]), np.array([[1, 0]]))
    assert per.tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        M.multilabel_stats(np.zeros((0, 2)), np.zeros((0, 2), int))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    assert M.dice(a, a) == 1.0
    assert M.dice(a, np.roll(a, 1, axis=0)) == 0.0
    b = np.zeros((4, 4), bool)
    b[0, :2] = True
    b[1, :2] = True
    assert M.dice(a, b) == 0.5
    assert M.dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        M.dice(a, np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 5, 5)) > 0.5
    assert M.dice(a, b) == M.dice(b, a)


def test_cl_score():
    assert M.cl_score(1, 1) == 1
    assert M.cl_score(0.7, 0) == 0
    assert M.cl_score(0.64, 0.25) == pytest.approx(0.4)
    assert M.cl_score(0.3, 0.8) == M.cl_score(0.8, 0.3)
    with pytest.raises(ValueError):
        M.cl_score(1.2, 0.5)


def test_sparseness_examples():
    assert M.sparseness(np.ones(10)) == 0.0
    n = 7
    assert M.sparseness(np.eye(1, n)[0]) == pytest.approx((n - 1) / n)
    assert M.sparseness([1.0, 3.0]) == pytest.approx(0.25)
    assert M.sparseness(np.zeros(4)) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100, allow_subnormal=False), min_size=2, max_size=30), st.floats(0.01, 100))
def test_sparseness_scale_invariant(vals, c):
    v = np.array(vals)
    if v.sum() == 0:
        return
    assert M.sparseness(v * c) == pytest.approx(M.sparseness(v), abs=1e-9)
    assert 0.0 <= M.sparseness(v) <= 1.0


def test_pointing_game():
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    m = np.zeros((3, 3))
    m[1, 1] = 1
    assert M.pointing_game(m, mask) == 1
    m2 = np.zeros((3, 3))
    m2[0, 2] = 1
    assert M.pointing_game(m2, mask) == 0
    # tie: (0, 2) comes first in row-major order and is outside
    m2[1, 1] = 1
    assert M.pointing_game(m2, mask) == 0
    assert M.pointing_game(m, np.zeros((3, 3), bool)) is None


def _toy_linear(weights, patch):
    """Model whose logit is a weighted sum of per-patch mean intensities."""
    def model(batch):
        b, h, w, _ = batch.shape
        means = batch.mean(-1).reshape(b, h // patch, patch, w // patch, patch).mean(axis=(2, 4)).reshape(b, -1)
        z = means @ weights
        return 1 / (1 + np.exp(-z))[:, None]
    return model


def test_selectivity_linear_oracle():
    patch = 2
    weights = np.array([3.0, -1.0, 2.0, 0.5])
    model = _toy_linear(weights, patch)
    image = np.ones((4, 4, 3))
    saliency = np.kron(np.array([[4.0, 1.0], [3.0, 2.0]]), np.ones((2, 2)))
    area, curve = M.selectivity(model, image, saliency, 0, patch=patch, step_fraction=0.25)
    # removal order: patch 0, 2, 3, 1 (each drops its weight from the logit)
    z = [4.5, 1.5, -0.5, -1.0, 0.0]
    hand = 1 / (1 + np.exp(-np.array(z)))
    np.testing.assert_allclose(curve, hand)
    assert area == pytest.approx(np.trapezoid(hand, np.linspace(0, 1, 5)))


def test_selectivity_constant_model_and_endpoint():
    const = lambda batch: np.full((len(batch), 1), 0.8)
    img = np.random.default_rng(0).random((4, 4, 3))
    area, curve = M.selectivity(const, img, img.mean(-1), 0, patch=2, step_fraction=0.25)
    assert area == pytest.approx(0.8)
    lin = _toy_linear(np.array([1.0, 2.0, 3.0, 4.0]), 2)
    base = np.full_like(img, 0.3)
    _, curve = M.selectivity(lin, img, img.mean(-1), 0, patch=2, step_fraction=0.25, baseline=base)
    assert curve[-1] == pytest.approx(lin(base[None])[0, 0])
    with pytest.raises(ValueError):
        M.selectivity(lambda b: np.full((len(b), 1), 0.2), img, img.mean(-1), 0, patch=2, step_fraction=0.25)
    with pytest.raises(ValueError):
        M.selectivity(const, img, img.mean(-1), 0, patch=2, step_fraction=0.3)


def test_continuity():
    assert M.map_difference(np.zeros((2, 2)), np.full((2, 2), 0.1)) == pytest.approx(25.5)
    img = np.random.default_rng(1).random((8, 8, 3))
    equivariant = lambda batch: batch[..., :1]
    assert M.continuity(equivariant, img, count=4, shift=2) == pytest.approx(0.0, abs=1e-12)
    assert M.continuity(equivariant, img, count=4, shift=0) == 0.0
    fixed = lambda batch: np.repeat(img[None, ..., :1], len(batch), axis=0)
    assert M.continuity(fixed, img, count=4, shift=2) > 0
    with pytest.raises(ValueError):
        M.continuity(equivariant, img, shift=8, patch=8)
    noisy = M.continuity(equivariant, img, count=2, mode="noise", seed=3)
    assert noisy == M.continuity(equivariant, img, count=2, mode="noise", seed=3)


def test_localization_helpers():
    maps = np.zeros((1, 2, 2, 2))
    maps[0, 0, 0, 0] = 1.0
    masks = np.zeros((1, 2, 2, 2), bool)
    masks[0, 0, 0, 0] = True
    masks[0, 1, 1, :] = True
    lesion = masks.any(axis=1)
    pairs = M.true_positive_pairs(np.array([[0.9, 0.2]]), np.array([[1, 1]]))
    assert pairs == [(0, 0)]
    mean, vals, per = M.localization_dice(maps, pairs, masks, 0.5)
    assert mean == 1.0 and math.isnan(per[1])
    assert M.whole_lesion_dice(pairs, masks, lesion) == pytest.approx(2 * 1 / (1 + 3))


def test_metric_report_invariants():
    r = M.MetricReport(acc=0.9, auc=0.95, f1=0.64, dice=0.25, cl_score=0.4)
    assert r.to_dict()["cl_score"]["mean"] == 0.4
    with pytest.raises(ValueError):
        M.MetricReport(acc=0.9, auc=0.95, f1=0.64, dice=0.25, cl_score=0.5)
    with pytest.raises(ValueError):
        M.MetricReport(acc=1.5, auc=0.9, f1=0.5)
