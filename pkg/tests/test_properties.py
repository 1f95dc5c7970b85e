"""Property tests over randomly generated inputs."""

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vaeattn.attention import combine_channels, minmax_normalize, normal_diff, NormalStats
from vaeattn.data import FactorSpec, augment_pixels, resize_array
from vaeattn.disentangle import attention_disentanglement_loss, permute_dims, select_attention_pair
from vaeattn.metrics import ScoredPixelSet, auroc, best_iou, binarize, roc_curve, score_maps
from vaeattn.model import LatentDistribution, kl_divergence

FAST = settings(max_examples=60, deadline=None,
                suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
nonneg = st.floats(0, 1e3, allow_nan=False, allow_infinity=False)
unit = st.floats(0, 1, allow_nan=False)


@st.composite
def pixel_sets(draw, max_size=200):
    n = draw(st.integers(2, max_size))
    scores = draw(arrays(np.float64, n, elements=st.integers(-20, 20).map(float) | finite))
    truth = draw(arrays(np.bool_, n))
    truth[0], truth[1] = True, False
    return ScoredPixelSet(scores, truth)


@st.composite
def map_pairs(draw):
    shape = draw(st.tuples(st.integers(1, 5), st.integers(1, 5)))
    a = draw(arrays(np.float64, shape, elements=nonneg))
    b = draw(arrays(np.float64, shape, elements=nonneg))
    return torch.from_numpy(a), torch.from_numpy(b)


# -- metrics ------------------------------------------------------------------------

@FAST
@given(pixel_sets(), st.floats(0.01, 10), st.floats(-5, 5))
def test_auroc_invariant_to_increasing_maps(ps, scale, shift):
    base = auroc(roc_curve(ps))
    n_distinct = len(np.unique(ps.scores))
    for f in (lambda s: scale * s + shift, lambda s: np.arctan(s / 1e3)):
        moved = f(ps.scores)
        # float rounding may merge neighbours, which is no longer strictly increasing
        if len(np.unique(moved)) == n_distinct:
            assert auroc(roc_curve(ScoredPixelSet(moved, ps.truth))) == pytest.approx(
                base, abs=1e-12)


@FAST
@given(pixel_sets())
def test_rates_monotone_in_threshold(ps):
    c = roc_curve(ps)
    assert np.all(np.diff(c.thresholds) < 0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert 0 <= auroc(c) <= 1


@FAST
@given(pixel_sets())
def test_binarizing_at_best_threshold_reproduces_iou(ps):
    iou, thr = best_iou(ps)
    pred = binarize(ps.scores, thr).astype(bool)
    assert (pred & ps.truth).sum() / (pred | ps.truth).sum() == iou


@FAST
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_pooling_order_irrelevant(n_images, seed):
    rng = np.random.default_rng(seed)
    maps = rng.integers(0, 6, (n_images, 4, 4)).astype(float)
    masks = rng.random((n_images, 4, 4)) < 0.3
    masks[0, 0, 0], masks[0, 0, 1] = True, False
    perm = rng.permutation(n_images)
    a, b = score_maps(maps, masks), score_maps(maps[perm], masks[perm])
    assert a.auroc == b.auroc and a.best_iou == b.best_iou


# -- L_AD -----------------------------------------------------------------------------

@FAST
@given(map_pairs(), st.floats(1e-3, 1e3))
def test_lad_range_symmetry_scale(pair, c):
    a, b = pair
    v = float(attention_disentanglement_loss(a, b))
    assert 0 <= v <= 1 + 1e-12
    assert v == float(attention_disentanglement_loss(b, a))
    assert float(attention_disentanglement_loss(c * a, c * b)) == pytest.approx(v, abs=1e-9)


@FAST
@given(map_pairs())
def test_lad_identity(pair):
    a, _ = pair
    v = float(attention_disentanglement_loss(a, a))
    assert v == (1.0 if a.sum() > 0 else 0.0)


@FAST
@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(0.1, 100))
def test_top2_scale_invariant(z, c):
    assert select_attention_pair(z * c) == select_attention_pair(z)


@FAST
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 1000))
def test_permute_dims_preserves_marginals(b, d, seed):
    z = torch.randn(b, d, generator=torch.Generator().manual_seed(seed))
    p = permute_dims(z, seed)
    assert torch.equal(p.sort(0).values, z.sort(0).values)


# -- attention ------------------------------------------------------------------------

@FAST
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, 3, elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_attention_nonnegative_and_homogeneous(acts, alpha, c):
    A, a = torch.from_numpy(acts), torch.from_numpy(alpha)
    m = combine_channels(a, A)
    assert (m >= 0).all()
    assert torch.allclose(combine_channels(c * a, A), c * m, rtol=1e-9, atol=1e-9)


@FAST
@given(arrays(np.float64, (3, 5), elements=finite))
def test_minmax_in_unit_range(values):
    out = minmax_normalize(values)
    assert out.min() >= 0 and out.max() <= 1


@FAST
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, 3, elements=st.floats(0.01, 3)),
       arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_normal_diff_moments(mu_x, sd_x, mu_y, logvar_y):
    dist = LatentDistribution(torch.from_numpy(mu_y)[None], torch.from_numpy(logvar_y)[None])
    nd = normal_diff(NormalStats(mu_x, sd_x), dist)
    assert np.allclose(np.asarray(nd.mean).ravel(), mu_x - mu_y)
    assert np.allclose(np.asarray(nd.var).ravel(), sd_x ** 2 + np.exp(logvar_y))


@FAST
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_kl_nonnegative(mu, logvar):
    kl = kl_divergence(LatentDistribution(torch.from_numpy(mu), torch.from_numpy(logvar)))
    assert (kl >= -1e-12).all()


# -- data ----------------------------------------------------------------------------

@FAST
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_factor_bijection(cards):
    spec = FactorSpec(tuple(f"f{i}" for i in range(len(cards))), tuple(cards))
    ords = np.arange(spec.size)
    assert np.array_equal(spec.to_ordinals(spec.to_factors(ords)), ords)


@FAST
@given(arrays(np.float32, (6, 5, 1), elements=unit.map(np.float32)),
       st.integers(0, 2 ** 31 - 1), st.integers(2, 12), st.integers(2, 12))
def test_augment_and_resize_stay_in_range(px, seed, h, w):
    out = augment_pixels(px, np.random.default_rng(seed))
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(np.sort(out.ravel()), np.sort(px.ravel()))
    for method in ("bilinear", "nearest"):
        r = resize_array(px, h, w, method)
        assert r.shape == (h, w, 1) and r.min() >= 0 and r.max() <= 1
