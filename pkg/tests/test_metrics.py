import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tcmgan.errors import ShapeError
from tcmgan.losses import dice_loss
from tcmgan.metrics import aggregate, dice_score, psnr, read_report, ssim, to_unit

from .oracles import dice_oracle, psnr_oracle, ssim_oracle


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((8, 8))
    assert psnr(a, a) == 100.0


def test_psnr_constant_offset():
    a, b = np.zeros((8, 8)), np.full((8, 8), 0.5)
    assert psnr(a, b, 1.0) == pytest.approx(10 * math.log10(4), abs=1e-9)
    assert psnr(a, b, 1.0) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-6


def test_psnr_symmetric_and_monotone():
    rng = np.random.default_rng(2)
    a = rng.random((16, 16))
    err = rng.normal(size=(16, 16)) * 0.05
    assert psnr(a, a + err) == psnr(a + err, a)
    assert psnr(a, a + 2 * err) < psnr(a, a + err)


@given(st.floats(1.01, 10))
@settings(max_examples=25)
def test_psnr_strictly_decreasing_in_error_scale(t):
    rng = np.random.default_rng(3)
    a = rng.random((12, 12))
    e = rng.normal(size=(12, 12)) * 0.01
    assert psnr(a, a + t * e) < psnr(a, a + e)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ssim_identity():
    a = np.random.default_rng(4).random((32, 32))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negation_about_mean():
    a = np.random.default_rng(5).random((32, 32))
    b = 2 * a.mean() - a
    assert ssim(a, b) < 1.0


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-4


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(7)
    a = rng.random((40, 40))
    b = np.clip(a + rng.normal(size=a.shape) * 0.1, 0, 1)
    ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-4


def test_ssim_symmetric():
    rng = np.random.default_rng(8)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


@given(arrays(np.float64, (14, 14), elements=st.floats(0, 1)))
@settings(max_examples=30)
def test_ssim_self_and_range(a):
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    b = np.roll(a, 3)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_dice_examples():
    m = np.zeros((8, 8), np.uint8)
    m[:4] = 1
    assert dice_score(m, m) == 1.0
    assert dice_score(m, 1 - m) == 0.0
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    k = 8
    p = np.zeros(4 * k, np.uint8)
    g = np.zeros(4 * k, np.uint8)
    p[:2 * k] = 1
    g[k:3 * k] = 1
    assert dice_score(p, g) == pytest.approx(0.5)


def test_dice_rejects_nonbinary():
    with pytest.raises(ValueError):
        dice_score(np.array([0, 2]), np.array([0, 1]))


def test_dice_matches_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        p = (rng.random((32, 32)) > 0.6).astype(np.uint8)
        g = (rng.random((32, 32)) > 0.5).astype(np.uint8)
        assert abs(dice_score(p, g) - dice_oracle(p, g)) < 1e-6


@given(arrays(np.uint8, (9, 9), elements=st.integers(0, 1)),
       arrays(np.uint8, (9, 9), elements=st.integers(0, 1)))
def test_dice_score_equals_one_minus_hard_dice_loss(p, g):
    if p.sum() == 0 or g.sum() == 0:
        return
    loss = dice_loss(torch.tensor(p[None], dtype=torch.float64),
                     torch.tensor(g[None], dtype=torch.float64), smooth=0.0)
    assert abs(dice_score(p, g) - (1 - float(loss))) < 1e-6


def test_to_unit():
    np.testing.assert_allclose(to_unit(np.array([-1.0, 0.0, 1.0])), [0.0, 0.5, 1.0])


def test_aggregate_single_and_three():
    r = aggregate([{"method": "a", "v": 3.0}], ("method",), ("v",))
    assert r.row("a")["v_std"] == 0.0
    r = aggregate([{"method": "a", "v": x} for x in (1.0, 2.0, 3.0)], ("method",), ("v",))
    assert r.row("a")["v_mean"] == pytest.approx(2.0)
    assert r.row("a")["v_std"] == pytest.approx(math.sqrt(2 / 3))
    assert r.row("a")["n"] == 3


def test_aggregate_drops_empty_group():
    recs = [{"method": "a", "v": 1.0}, {"method": "b", "v": float("nan")}]
    r = aggregate(recs, ("method",), ("v",))
    assert list(r.rows) == [("a",)]
    assert r.warnings and "b" in r.warnings[0]


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([], ("method",), ("v",))


def test_report_csv_header(tmp_path):
    recs = [{"method": "MGAN", "modality": m, "psnr": 20.0 + i, "ssim": 0.9}
            for i, m in enumerate(["FLAIR", "T1", "T1ce"])]
    r = aggregate(recs, ("method", "modality"), ("psnr", "ssim"))
    path = tmp_path / "quality_report.csv"
    r.to_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "# statistics over: slice"
    assert text[1] == "method,modality,psnr_mean,psnr_std,ssim_mean,ssim_std,n"
    rows = read_report(path)
    assert [row["modality"] for row in rows] == ["FLAIR", "T1", "T1ce"]
