import numpy as np
import pytest

from oracles import brute_force_roc, exhaustive_best_iou, mann_whitney
from vaeattn.data import DatasetManifest, ImageSample
from vaeattn.exceptions import PairingError
from vaeattn.metrics import (LocalizationReport, ScoredPixelSet, UndefinedRocError, auroc,
                             best_iou, binarize, evaluate_category, read_report_csv,
                             recon_diff_map, roc_curve, score_maps, write_report_csv)


def _instance(rng, n=1000, levels=None):
    scores = rng.normal(size=n) if levels is None else rng.integers(0, levels, n).astype(float)
    truth = rng.random(n) < 0.3
    truth[:2] = [True, False]
    return ScoredPixelSet(scores, truth)


# -- recon baseline -----------------------------------------------------------

def test_recon_diff_examples(rng):
    x = rng.uniform(size=(2, 4, 4, 3))
    assert np.array_equal(recon_diff_map(x, x), np.zeros((2, 4, 4)))
    b = (rng.random((4, 4, 1)) > 0.5).astype(float)
    assert np.array_equal(recon_diff_map(b, 1 - b), np.ones((4, 4)))
    y = rng.uniform(size=(2, 4, 4, 3))
    assert np.allclose(recon_diff_map(x + 0.3, y + 0.3), recon_diff_map(x, y))
    with pytest.raises(ValueError):
        recon_diff_map(x, y[..., :1])


# -- ROC -----------------------------------------------------------------------

def test_perfect_separator():
    ps = ScoredPixelSet([0, 0, 1, 1, 0], [0, 0, 1, 1, 0])
    c = roc_curve(ps)
    assert any(f == 0 and t == 1 for f, t in zip(c.fpr, c.tpr))
    assert auroc(c) == 1.0
    assert best_iou(ps) == (1.0, 1.0)


def test_all_tied_scores():
    c = roc_curve(ScoredPixelSet(np.full(6, 0.4), [1, 0, 0, 1, 0, 0]))
    assert list(c.fpr) == [0, 1] and list(c.tpr) == [0, 1]
    assert auroc(c) == 0.5


def test_curve_endpoints_and_monotone(rng):
    c = roc_curve(_instance(rng, levels=7))
    assert (c.fpr[0], c.tpr[0]) == (0, 0) and (c.fpr[-1], c.tpr[-1]) == (1, 1)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert np.all(np.diff(c.thresholds) < 0)


@pytest.mark.parametrize("levels", [None, 5, 50])
def test_roc_equals_brute_force(rng, levels):
    ps = _instance(rng, levels=levels)
    c = roc_curve(ps)
    oracle = brute_force_roc(ps.scores, ps.truth)
    assert len(c.thresholds) == len(oracle) + 1
    for k, (t, f, tp) in enumerate(oracle, start=1):
        assert c.thresholds[k] == t and c.fpr[k] == f and c.tpr[k] == tp


@pytest.mark.parametrize("levels", [None, 3, 20])
def test_auroc_equals_mann_whitney(rng, levels):
    ps = _instance(rng, levels=levels)
    assert abs(auroc(roc_curve(ps)) - mann_whitney(ps.scores, ps.truth)) < 1e-9


def test_best_iou_equals_exhaustive_scan(rng):
    for levels in (None, 4, 30):
        ps = _instance(rng, n=500, levels=levels)
        iou, thr = best_iou(ps)
        o_iou, o_thr = exhaustive_best_iou(ps.scores, ps.truth)
        assert iou == o_iou and thr == o_thr
        pred = binarize(ps.scores, thr).astype(bool)
        assert (pred & ps.truth).sum() / (pred | ps.truth).sum() == iou


def test_disjoint_best_iou():
    ps = ScoredPixelSet([1.0, 1.0, 0.0, 0.0], [0, 0, 1, 1])
    iou, thr = best_iou(ps)
    # only the full sweep endpoint (everything positive) overlaps the truth
    assert thr == 0.0 and iou == 0.5
    ps = ScoredPixelSet([1.0, 0.0], [0, 1])
    assert best_iou(ps)[0] == 0.5


def test_undefined_roc():
    with pytest.raises(UndefinedRocError):
        roc_curve(ScoredPixelSet([0.1, 0.2], [1, 1]))
    with pytest.raises(UndefinedRocError):
        roc_curve(ScoredPixelSet([0.1, 0.2], [0, 0]))
    with pytest.raises(ValueError):
        ScoredPixelSet([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        ScoredPixelSet([0.1, np.nan], [0, 1])
    with pytest.raises(ValueError):
        ScoredPixelSet([0.1], [0, 1])


def test_auroc_invariant_to_monotone_transforms(rng):
    ps = _instance(rng, levels=40)
    base = auroc(roc_curve(ps))
    for f in (np.exp, lambda s: 3.5 * s - 2.0, lambda s: s ** 3):
        assert auroc(roc_curve(ScoredPixelSet(f(ps.scores), ps.truth))) == pytest.approx(
            base, abs=1e-12)


def test_quantile_sweep_is_close(rng):
    ps = _instance(rng, n=20000)
    exact = auroc(roc_curve(ps))
    approx = roc_curve(ps, max_thresholds=512)
    assert len(approx.thresholds) <= 513
    assert (approx.fpr[-1], approx.tpr[-1]) == (1, 1)
    assert abs(auroc(approx) - exact) < 1e-3


def test_pooling_order_irrelevant(rng):
    maps = rng.uniform(size=(5, 6, 6))
    masks = rng.random((5, 6, 6)) < 0.2
    a = score_maps(maps, masks)
    perm = rng.permutation(5)
    b = score_maps(maps[perm], masks[perm])
    assert a.auroc == b.auroc and a.best_iou == b.best_iou


def test_score_maps_normalizes_per_image():
    maps = np.stack([np.linspace(0, 1, 4).reshape(2, 2), 100 * np.linspace(0, 1, 4).reshape(2, 2)])
    masks = np.array([[[0, 0], [0, 1]], [[0, 0], [0, 1]]])
    assert score_maps(maps, masks).auroc == 1.0
    rep = score_maps(maps, masks, normalize=False)
    assert rep.n_pos == 2 and rep.n_neg == 6


# -- evaluation ----------------------------------------------------------------

def test_evaluate_category_reports(trained, defects):
    train, test = defects
    from vaeattn.attention import fit_normal_stats

    stats = fit_normal_stats(trained, train.images())
    reports = evaluate_category(trained, test, "both", mode="normal-diff", stats=stats)
    assert [r.method for r in reports] == ["attention", "recon"]
    for r in reports:
        assert 0 <= r.auroc <= 1 and 0 <= r.best_iou <= 1
        assert r.n_pos == int(test.masks().sum())
    assert reports[0].layer == "conv2" and reports[1].layer == ""
    (only,) = evaluate_category(trained, test, "recon")
    assert only == reports[1]


def test_evaluate_category_missing_masks(trained):
    test = DatasetManifest("test", [ImageSample(np.zeros((32, 32, 1)), None, "abnormal", "x")])
    with pytest.raises(PairingError, match="x"):
        evaluate_category(trained, test)


def test_report_csv_roundtrip(tmp_path):
    reports = [LocalizationReport("tex", "attention", "conv2", 0.123456789012345, 0.5, 0.25,
                                  10, 90),
               LocalizationReport("tex", "recon", "", 0.7, 1 / 3, 0.1, 10, 90)]
    path = write_report_csv(reports, tmp_path / "r.csv")
    header = path.read_text().splitlines()[0]
    assert header == "category,method,layer,auroc,best_iou,best_threshold,n_pos,n_neg"
    assert read_report_csv(path) == reports
