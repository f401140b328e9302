"""Metric primitives against naive brute-force references and closed forms."""

import math

import numpy as np
import pytest

from multicond import metrics as mx
from multicond.errors import ContractError, DomainError


# --- naive reference implementations (independent oracles, plain loops) ---

def ref_ssim(a, b):
    w = np.zeros((7, 7))
    for i in range(7):
        for j in range(7):
            w[i, j] = math.exp(-((i - 3) ** 2 + (j - 3) ** 2) / (2 * 1.5**2))
    w /= w.sum()
    h, wid = a.shape
    vals = []
    for r in range(h - 6):
        for c in range(wid - 6):
            pa = a[r : r + 7, c : c + 7]
            pb = b[r : r + 7, c : c + 7]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a**2
            vb = (w * pb * pb).sum() - mu_b**2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + 0.01**2) * (2 * cov + 0.03**2)
            den = (mu_a**2 + mu_b**2 + 0.01**2) * (va + vb + 0.03**2)
            vals.append(num / den)
    return float(np.mean(vals))


def ref_f1(pred, gt):
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = pred[i, j], gt[i, j]
            tp += int(p == 1 and g == 1)
            fp += int(p == 1 and g == 0)
            fn += int(p == 0 and g == 1)
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def ref_miou(pred, gt, k):
    ious = []
    for cls in range(k):
        inter = union = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = pred[i, j] == cls
                g = gt[i, j] == cls
                inter += int(p and g)
                union += int(p or g)
        if union:
            ious.append(inter / union)
    return float(np.mean(ious))


def ref_rmse(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            acc += (a[i, j] - b[i, j]) ** 2
    return math.sqrt(acc / a.size)


def ref_frechet(fa, fb):
    from scipy import linalg

    mu_a = fa.mean(axis=0)
    mu_b = fb.mean(axis=0)
    ca = np.cov(fa, rowvar=False)
    cb = np.cov(fb, rowvar=False)
    ca = np.atleast_2d(ca)
    cb = np.atleast_2d(cb)
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * np.trace(covmean))


# --- oracle equivalence on random 8x8 instances ---

def test_ssim_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.random((8, 8))
        b = rng.random((8, 8))
        assert abs(mx.ssim(a, b) - ref_ssim(a, b)) < 1e-9


def test_f1_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = (rng.random((8, 8)) > 0.6).astype(int)
        g = (rng.random((8, 8)) > 0.6).astype(int)
        assert abs(mx.f1_edge(p, g) - ref_f1(p, g)) < 1e-9


def test_miou_matches_reference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.integers(0, 5, size=(8, 8))
        g = rng.integers(0, 5, size=(8, 8))
        assert abs(mx.miou(p, g, 5) - ref_miou(p, g, 5)) < 1e-9


def test_rmse_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.random((8, 8))
        b = rng.random((8, 8))
        assert abs(mx.rmse(a, b) - ref_rmse(a, b)) < 1e-9


def test_frechet_matches_reference():
    rng = np.random.default_rng(4)
    for _ in range(20):
        fa = rng.normal(size=(16, 8))
        fb = rng.normal(size=(16, 8))
        assert abs(mx.frechet_distance(fa, fb) - ref_frechet(fa, fb)) < 1e-9


# --- closed forms and conventions ---

def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(5)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    assert mx.ssim(a, a) == pytest.approx(1.0)
    assert mx.ssim(a, b) == pytest.approx(mx.ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    a = np.zeros((16, 16))
    b = np.ones((16, 16))
    expected = (0.01**2) / (1 + 0.01**2)  # ~1.0e-4
    assert mx.ssim(a, b) == pytest.approx(expected, rel=1e-9)
    assert mx.ssim(a, b) == pytest.approx(1.0e-4, rel=1e-2)


def test_ssim_shape_mismatch():
    with pytest.raises(ContractError):
        mx.ssim(np.zeros((8, 8)), np.zeros((9, 9)))


def test_f1_hand_count():
    gt = np.zeros((4, 4), dtype=int)
    gt[0, :4] = 1  # 4 positives
    pred = np.zeros((4, 4), dtype=int)
    pred[0, :2] = 1  # 2 hits
    pred[1, :2] = 1  # 2 false positives
    assert mx.f1_edge(pred, gt) == pytest.approx(0.5)


def test_f1_conventions():
    z = np.zeros((4, 4), dtype=int)
    o = np.ones((4, 4), dtype=int)
    assert mx.f1_edge(z, z) == 1.0
    assert mx.f1_edge(z, o) == 0.0
    assert mx.f1_edge(o, o) == 1.0
    with pytest.raises(DomainError):
        mx.f1_edge(np.full((4, 4), 0.5), z)


def test_miou_hand_count():
    gt = np.zeros((2, 2), dtype=int)
    gt[:, 0] = 1  # left column class 1
    pred = np.zeros((2, 2), dtype=int)
    pred[0, :] = 1  # top row class 1
    # class1: inter 1, union 3 -> 1/3 ; class0: inter 1, union 3 -> 1/3
    assert mx.miou(pred, gt, 2) == pytest.approx(1 / 3)


def test_miou_identity_and_domain():
    g = np.array([[0, 1], [2, 0]])
    assert mx.miou(g, g, 3) == 1.0
    with pytest.raises(DomainError):
        mx.miou(g, g, 2)


def test_rmse_closed_forms():
    a = np.zeros((4, 4))
    b = np.ones((4, 4))
    assert mx.rmse(a, a) == 0.0
    assert mx.rmse(a, b) == pytest.approx(1.0)
    half = np.zeros((4, 4))
    half[:2, :] = 1.0
    assert mx.rmse(half, np.zeros((4, 4))) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(DomainError):
        mx.rmse(a - 1.0, b)


def test_frechet_identical_sets_zero():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(10, 4))
    assert abs(mx.frechet_distance(f, f)) < 1e-6


def test_frechet_shifted_1d_closed_form():
    fa = np.array([[-1.0], [1.0]])
    fb = np.array([[0.0], [2.0]])
    assert mx.frechet_distance(fa, fb) == pytest.approx(1.0, abs=1e-9)


def test_frechet_symmetry_and_domain():
    rng = np.random.default_rng(7)
    fa = rng.normal(size=(12, 6))
    fb = rng.normal(size=(12, 6))
    assert mx.frechet_distance(fa, fb) == pytest.approx(mx.frechet_distance(fb, fa), abs=1e-9)
    with pytest.raises(DomainError):
        mx.frechet_distance(fa[:1], fb)


def test_spearman_basics():
    assert mx.spearman([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
    assert mx.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert mx.spearman([1, 1, 1, 1], [4, 3, 2, 1]) == 0.0


# --- records and reports ---

def _rec(combo, metric, value, n=1, seed=0, exp="e1"):
    return mx.MetricRecord(experiment_id=exp, combo=combo, metric=metric, value=value,
                           n_samples=n, seed=seed)


def test_report_rows_and_column_order():
    records = [
        _rec("edge", "fd_proxy", 1.0),
        _rec("edge", "alignment", 0.5),
        _rec("edge+luma", "fd_proxy", 0.8),
        _rec("edge+luma", "alignment", 0.6),
        _rec("all", "fd_proxy", 0.7),
        _rec("all", "alignment", 0.7),
    ]
    text = mx.build_report(records)
    lines = [l for l in text.splitlines() if l.startswith("|") and "---" not in l]
    assert len(lines) == 4  # header + 3 combo rows
    assert lines[0].index("fd_proxy") < lines[0].index("alignment")
    assert [l.split("|")[1].strip() for l in lines[1:]] == ["edge", "edge+luma", "all"]


def test_report_duplicate_aggregation():
    records = [
        _rec("all", "ssim", 0.4, n=1),
        _rec("all", "ssim", 0.8, n=3),
    ]
    text = mx.build_report(records)
    # n-weighted mean: (0.4*1 + 0.8*3)/4 = 0.7, n = 4
    assert "0.7000" in text
    assert "| 4 |" in text


def test_report_group_by_seed():
    records = [_rec("all", "ssim", 0.5, seed=1), _rec("all", "ssim", 0.6, seed=2)]
    text = mx.build_report(records, grouping="seed")
    assert "seed 1" in text and "seed 2" in text


def test_report_empty():
    assert "no data" in mx.build_report([])


def test_records_roundtrip(tmp_path):
    records = [_rec("all", "ssim", 0.5), _rec("edge", "fd_proxy", 1.25, n=2, seed=3)]
    path = tmp_path / "records.jsonl"
    mx.write_records(records, path)
    assert mx.load_records(path) == records


def test_metric_record_validation():
    with pytest.raises(DomainError):
        _rec("all", "ssim", float("nan"))
    with pytest.raises(DomainError):
        _rec("all", "ssim", 0.5, n=0)


def test_save_image_grid(tmp_path):
    imgs = [np.ones((8, 8, 3)) * v for v in (0.2, 0.8, 0.5)]
    path = tmp_path / "grid.png"
    mx.save_image_grid(imgs, path, scores=[0.1, 0.9, 0.5])
    from PIL import Image

    arr = np.asarray(Image.open(path))
    assert arr.shape[0] == 8
    # ordered by descending score: brightest tile (0.8) first
    assert arr[0, 0, 0] == round(0.8 * 255)
