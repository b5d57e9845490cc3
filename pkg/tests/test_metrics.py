import math

import numpy as np
import pytest

from mri2pet.dataio import Volume3D
from mri2pet.errors import ContractViolation
from mri2pet.evaluation.metrics import (
    MetricsReport,
    evaluate_volume_pairs,
    image_metrics,
    ssim_slice,
)


def vol(data) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.float32), "PET")


def test_identical_pair_perfect_scores(rng):
    v = vol(rng.random((16, 16, 16)))
    report = image_metrics(v, v)
    assert report.mae_pct == 0.0
    assert report.mse_pct == 0.0
    assert report.psnr_db == 99.0  # capped sentinel
    assert report.ssim_pct == pytest.approx(100.0, abs=1e-9)


def test_constant_offset_closed_form(rng):
    base = 0.2 + 0.5 * rng.random((16, 16, 16))  # offset keeps values inside [0, 1]
    a = vol(base)
    b = vol(base + 0.1)
    report = image_metrics(a, b)
    assert report.mae_pct == pytest.approx(10.0, abs=1e-6)
    assert report.mse_pct == pytest.approx(1.0, abs=1e-6)
    assert report.psnr_db == pytest.approx(20.0, abs=1e-6)


def test_metric_symmetry(rng):
    a = vol(rng.random((12, 12, 12)))
    b = vol(rng.random((12, 12, 12)))
    r_ab = image_metrics(a, b)
    r_ba = image_metrics(b, a)
    assert r_ab.mae_pct == r_ba.mae_pct
    assert r_ab.mse_pct == r_ba.mse_pct
    assert r_ab.psnr_db == r_ba.psnr_db
    assert r_ab.ssim_pct == pytest.approx(r_ba.ssim_pct, abs=1e-9)


def test_psnr_mse_consistency(rng):
    a = vol(rng.random((10, 10, 10)))
    b = vol(rng.random((10, 10, 10)))
    report = image_metrics(a, b)
    mse_raw = report.mse_pct / 100.0
    assert report.psnr_db == pytest.approx(-10.0 * math.log10(mse_raw), abs=1e-9)


def test_ssim_self_is_one(rng):
    img = rng.random((16, 16))
    assert ssim_slice(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_decreases_with_noise(rng):
    img = rng.random((32, 32))
    noisy_small = img + 0.01 * rng.standard_normal((32, 32))
    noisy_big = img + 0.2 * rng.standard_normal((32, 32))
    assert ssim_slice(img, noisy_small) > ssim_slice(img, noisy_big)


def test_shape_and_range_contracts(rng):
    a = vol(rng.random((8, 8, 8)))
    with pytest.raises(ContractViolation):
        image_metrics(a, vol(rng.random((8, 8, 9))))
    bad = Volume3D(np.full((8, 8, 8), 2.0, dtype=np.float32), "PET")
    with pytest.raises(ContractViolation):
        image_metrics(a, bad)


def test_evaluate_pairs_aggregates(rng):
    pairs = []
    for i in range(3):
        base = 0.2 + 0.5 * rng.random((8, 8, 8))
        pairs.append((f"S{i}", vol(base), vol(base + 0.1)))
    report = evaluate_volume_pairs(pairs)
    assert len(report.per_subject) == 3
    assert report.mae_pct == pytest.approx(10.0, abs=1e-6)
    assert {row["subject_id"] for row in report.per_subject} == {"S0", "S1", "S2"}


def test_report_formats_reference_magnitudes():
    # formatting sanity at published magnitudes (context only, not asserted
    # against any computation)
    report = MetricsReport(mae_pct=3.45, mse_pct=0.43, psnr_db=24.59, ssim_pct=86.29)
    table = report.format_table()
    assert "3.450" in table and "24.59" in table
    payload = report.to_dict()
    assert payload["ssim_pct"] == 86.29
