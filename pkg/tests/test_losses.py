import math

import numpy as np
import pytest

from geodistill.autodiff import Tensor
from geodistill.features import normalize_rows
from geodistill.gradcheck import TOLERANCE, run_gradcheck
from geodistill.losses import (LossValue, LossWeights, ablation_loss, combined_loss, contrastive_loss,
                               cosine_similarity, geometric_similarity_loss, naive_geodesic_loss,
                               reconstruction_loss, relative_geodesic_loss)


def test_cosine_examples(rng):
    v = rng.normal(size=5)
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_clamped_and_zero_rejected():
    for v in np.random.default_rng(5).normal(size=(200, 7)):
        assert cosine_similarity(v, 3 * v) <= 1.0 and cosine_similarity(v, -v) >= -1.0
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


def test_contrastive_examples():
    s = np.array([[1.0, 0.0]])
    assert contrastive_loss(s, [0], np.array([[0.0]])).value == 0.0
    assert contrastive_loss(s, [0], np.array([[0.5]])).value == 0.5
    pair = np.array([[1.0, 0.0], [-1.0, 0.0]])
    d = np.array([[0.0], [1.0]])
    assert contrastive_loss(pair, [0], d).value == 0.0


def test_contrastive_formula(rng):
    s = normalize_rows(rng.normal(size=(7, 3)))
    anchors = [1, 4]
    d = rng.uniform(size=(7, 2))
    ref = np.mean([abs(d[n, j] - (1 - s[n] @ s[a]) / 2) for n in range(7) for j, a in enumerate(anchors)])
    assert contrastive_loss(s, anchors, d).value == pytest.approx(ref, rel=1e-12)


def test_contrastive_orthogonal_invariance(rng):
    s = normalize_rows(rng.normal(size=(9, 4)))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    d = rng.uniform(size=(9, 3))
    a = contrastive_loss(s, [0, 3, 5], d).value
    assert contrastive_loss(s @ q, [0, 3, 5], d).value == pytest.approx(a, rel=1e-12)


def test_contrastive_errors(rng):
    s = normalize_rows(rng.normal(size=(4, 3)))
    with pytest.raises(ValueError):
        contrastive_loss(s, [0, 1], np.zeros((4, 3)))
    with pytest.raises(IndexError):
        contrastive_loss(s, [9], np.zeros((4, 1)))


def test_reconstruction_examples(rng):
    f = normalize_rows(rng.normal(size=(5, 4)))
    assert reconstruction_loss(f, f).value == pytest.approx(0.0, abs=1e-15)
    assert reconstruction_loss(f, -f).value == pytest.approx(2.0)
    e = np.eye(4)
    assert reconstruction_loss(e, np.roll(e, 1, axis=1)).value == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(f, f[:, :3])


def _lv(x):
    return LossValue(Tensor(np.array(x)))


def test_combined_examples():
    assert combined_loss(LossWeights(), _lv(0.2), _lv(0.3)).value == pytest.approx(0.5)
    assert combined_loss(LossWeights(w_r=2, w_c=0), _lv(0.2), _lv(0.3)).value == pytest.approx(0.6)
    assert combined_loss(LossWeights(w_r=0, w_c=3), _lv(0.2), _lv(0.3)).value == pytest.approx(0.6)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1)


def test_ngl_zero_when_distances_agree(rng):
    e = rng.normal(size=(6, 3))
    anchors = [0, 2]
    dS = np.linalg.norm(e[:, None] - e[anchors][None], axis=2)
    assert naive_geodesic_loss(e, anchors, dS).value == pytest.approx(0.0, abs=1e-12)


def test_rgl_single_pair():
    e = np.array([[0.0, 0.0], [2.0, 0.0]])
    dS = np.array([[1.0], [0.0]])
    # row 0 vs anchor 1 has dS=1, dE=2; the anchor's own pair is excluded
    assert relative_geodesic_loss(e, [1], dS).value == pytest.approx(1.0)


def test_rgl_excludes_degenerate_pairs(caplog):
    e = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    dS = np.array([[0.0], [1.0], [0.0]])
    lv = relative_geodesic_loss(e, [0], dS)
    assert lv.breakdown["rgl_excluded"] == 1
    assert lv.value == pytest.approx(1.0)


def test_gsl_parallel_vectors_zero(rng):
    e = rng.normal(size=(12, 3))
    anchors = [0, 5]
    dS = 2.5 * np.linalg.norm(e[:, None] - e[anchors][None], axis=2)
    assert geometric_similarity_loss(e, anchors, dS).value == pytest.approx(0.0, abs=1e-12)


def test_gsl_scale_invariant(rng):
    e = rng.normal(size=(12, 3))
    dS = rng.uniform(0.1, 1, size=(12, 2))
    a = geometric_similarity_loss(e, [0, 5], dS).value
    assert geometric_similarity_loss(7.0 * e, [0, 5], dS).value == pytest.approx(a, rel=1e-12)


def test_ablation_dispatch(rng):
    e = rng.normal(size=(5, 3))
    dS = rng.uniform(0.1, 1, size=(5, 1))
    assert ablation_loss("NGL", e, [0], dS).value == naive_geodesic_loss(e, [0], dS).value
    with pytest.raises(ValueError):
        ablation_loss("XYZ", e, [0], dS)


def test_gradients_match_finite_differences():
    results = run_gradcheck(seed=0)
    names = {r.name for r in results}
    assert {"L_c", "L_r", "combined", "RGL", "NGL", "GSL", "point", "ARAP", "smooth"} <= names
    for r in results:
        assert r.coordinates >= 100
        assert r.max_rel_error <= TOLERANCE, r
