"""Metric oracles and evaluation harness tests.

The SSIM oracle is a naive per-window double loop, kept deliberately separate
from the separable-filter implementation; PSNR expectations are closed-form
arithmetic computed in-test.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deshadow.data import ImagePair, from_uint8
from deshadow.metrics import (
    MetricsRecord,
    cross_dataset_eval,
    evaluate,
    psnr,
    seed_variance,
    ssim,
)


def levels_image(levels: np.ndarray) -> np.ndarray:
    """Build a [-1, 1] image that quantizes exactly to the given levels."""
    return from_uint8(np.asarray(levels, dtype=np.uint8))


# ----------------------------------------------------------------- PSNR ---


def test_psnr_constant_offset_closed_form():
    # Sixteen gray levels apart everywhere: MSE = 256.
    a = levels_image(np.full((24, 24, 3), 40))
    b = levels_image(np.full((24, 24, 3), 56))
    expected = 10.0 * math.log10(255.0**2 / 256.0)
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(24.0484, abs=1e-3)


def test_psnr_identical_is_infinite():
    img = levels_image(np.arange(48).reshape(4, 4, 3) * 5)
    assert psnr(img, img) == math.inf


def test_psnr_black_vs_white_is_zero():
    a = levels_image(np.zeros((8, 8, 3)))
    b = levels_image(np.full((8, 8, 3), 255))
    assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)


def test_psnr_measures_quantized_values():
    # Differences below half a quantization level vanish.
    a = np.zeros((6, 6, 3), dtype=np.float32)
    b = a + np.float32(0.2 / 127.5)
    assert psnr(a, b) == math.inf


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ----------------------------------------------------------------- SSIM ---


def gaussian_1d(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def naive_ssim(a_levels: np.ndarray, b_levels: np.ndarray) -> float:
    """Oracle: windowed SSIM with explicit loops over valid positions."""
    g = gaussian_1d()
    win = np.outer(g, g)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    if a_levels.ndim == 2:
        a_levels = a_levels[:, :, None]
        b_levels = b_levels[:, :, None]
    h, w, nc = a_levels.shape
    per_channel = []
    for c in range(nc):
        x = a_levels[:, :, c].astype(np.float64)
        y = b_levels[:, :, c].astype(np.float64)
        vals = []
        for i in range(h - 10):
            for j in range(w - 10):
                wx = x[i : i + 11, j : j + 11]
                wy = y[i : i + 11, j : j + 11]
                mu_x = (win * wx).sum()
                mu_y = (win * wy).sum()
                var_x = (win * wx * wx).sum() - mu_x**2
                var_y = (win * wy * wy).sum() - mu_y**2
                cov = (win * wx * wy).sum() - mu_x * mu_y
                vals.append(
                    ((2 * mu_x * mu_y + c1) * (2 * cov + c2))
                    / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
                )
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def test_ssim_matches_naive_window_oracle():
    rng = np.random.default_rng(0)
    la = rng.integers(0, 256, size=(14, 13))
    lb = np.clip(la + rng.integers(-30, 30, size=(14, 13)), 0, 255)
    got = ssim(levels_image(la), levels_image(lb))
    want = naive_ssim(la, lb)
    assert got == pytest.approx(want, abs=1e-9)


def test_ssim_matches_naive_oracle_color():
    rng = np.random.default_rng(1)
    la = rng.integers(0, 256, size=(12, 15, 3))
    lb = rng.integers(0, 256, size=(12, 15, 3))
    assert ssim(levels_image(la), levels_image(lb)) == pytest.approx(
        naive_ssim(la, lb), abs=1e-9
    )


def test_ssim_identical_is_one():
    rng = np.random.default_rng(2)
    img = levels_image(rng.integers(0, 256, size=(16, 16, 3)))
    assert ssim(img, img) == 1.0


def test_ssim_black_vs_white_closed_form():
    a = levels_image(np.zeros((16, 16)))
    b = levels_image(np.full((16, 16), 255))
    c1 = (0.01 * 255.0) ** 2
    expected = c1 / (255.0**2 + c1)
    got = ssim(a, b)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(1.0e-4, abs=1e-5)


def test_ssim_rejects_images_smaller_than_window():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metric_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    a = levels_image(rng.integers(0, 256, size=(12, 12)))
    b = levels_image(rng.integers(0, 256, size=(12, 12)))
    assert psnr(a, b) == psnr(b, a)
    sa, sb = ssim(a, b), ssim(b, a)
    assert sa == pytest.approx(sb, abs=1e-12)
    assert -1.0 <= sa <= 1.0


# ------------------------------------------------------------- evaluate ---


def tiny_dataset(n=3, size=24, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        tgt = rng.uniform(-1, 1, (size, size, 3)).astype(np.float32)
        inp = np.clip(tgt - 0.3, -1, 1).astype(np.float32)
        pairs.append(ImagePair(input=inp, target=tgt, image_id=f"img{i:02d}"))
    return pairs


def test_evaluate_identity_model_on_identity_pairs(tmp_path):
    pairs = [
        ImagePair(p.target, p.target, p.image_id) for p in tiny_dataset(3)
    ]
    record = evaluate(lambda x: x, pairs, seed=7, eval_size=32, out_dir=tmp_path)
    assert record.count == 3
    assert record.mean_psnr == math.inf
    assert record.mean_ssim == pytest.approx(1.0, abs=1e-12)
    assert all(r.psnr_db == math.inf for r in record.rows)

    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image_id", "psnr_db", "ssim"]
    assert len(rows) == 4
    assert rows[1][1] == "inf"

    summary = json.loads((tmp_path / "metrics_summary.json").read_text())
    assert summary["mean_psnr"] == "inf"
    assert summary["count"] == 3
    assert summary["protocol"]["seed"] == 7
    assert summary["protocol"]["eval_size"] == 32
    assert (tmp_path / "metrics.png").exists()


def test_evaluate_mean_is_arithmetic_mean_of_rows():
    pairs = tiny_dataset(4)
    record = evaluate(lambda x: x, pairs, eval_size=32)
    want = np.mean([r.psnr_db for r in record.rows])
    assert record.mean_psnr == pytest.approx(want, abs=1e-9)
    want_s = np.mean([r.ssim for r in record.rows])
    assert record.mean_ssim == pytest.approx(want_s, abs=1e-9)


def test_evaluate_records_failed_rows_without_aborting():
    pairs = tiny_dataset(3)

    def flaky(img):
        if float(img.sum()) == float(pairs[1].input.sum()):
            raise RuntimeError("boom")
        return img

    record = evaluate(flaky, pairs, eval_size=32)
    assert len(record.rows) == 3
    failed = [r for r in record.rows if r.failed]
    assert len(failed) == 1
    assert "boom" in failed[0].error
    assert record.count == 2
    assert math.isfinite(record.mean_psnr)


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        evaluate(lambda x: x, [], eval_size=32)


def test_evaluate_rejects_silently_wrong_shapes_as_failed_rows():
    pairs = tiny_dataset(2)
    record = evaluate(lambda x: x[:-1], pairs, eval_size=32)
    assert all(r.failed for r in record.rows)
    assert math.isnan(record.mean_psnr)


def test_evaluate_applies_resize_protocol():
    # At eval_size equal to the native size the scores match direct metrics.
    pairs = tiny_dataset(2, size=32)
    record = evaluate(lambda x: np.clip(x + 0.1, -1, 1), pairs, eval_size=32)
    direct = psnr(np.clip(pairs[0].input + 0.1, -1, 1), pairs[0].target)
    assert record.rows[0].psnr_db == pytest.approx(direct, abs=1e-12)


# -------------------------------------------------------- seed variance ---


def test_seed_variance_deterministic_model_is_exactly_zero(tmp_path):
    pairs = tiny_dataset(3)
    report = seed_variance(
        lambda img, seed: np.clip(img + 0.05, -1, 1),
        pairs,
        seeds=[1, 2, 3, 4, 5],
        eval_size=32,
        out_dir=tmp_path,
    )
    assert report.seeds == [1, 2, 3, 4, 5]
    assert report.mean_variance == 0.0
    assert all(r["psnr_variance"] == 0.0 for r in report.per_image)

    payload = json.loads((tmp_path / "variance.json").read_text())
    assert payload["seeds"] == [1, 2, 3, 4, 5]
    assert payload["variance_convention"] == "population"
    assert payload["mean_variance"] == 0.0
    assert {r["image_id"] for r in payload["per_image"]} == {
        p.image_id for p in pairs
    }
    assert (tmp_path / "variance.png").exists()


def test_seed_variance_detects_seed_dependence():
    pairs = tiny_dataset(2)

    def jittery(img, seed):
        rng = np.random.default_rng(seed)
        return np.clip(img + rng.uniform(0.0, 0.2), -1, 1)

    report = seed_variance(jittery, pairs, seeds=[1, 2, 3], eval_size=32)
    assert report.mean_variance > 0.0


def test_seed_variance_population_convention():
    # Hand-checked: values (30, 32, 34) -> population variance 8/3.
    pairs = tiny_dataset(1)
    calls = {"n": 0}

    def model(img, seed):
        offsets = {1: 8.0, 2: 16.0, 3: 24.0}
        return np.clip(img + offsets[seed] / 127.5, -1, 1)

    report = seed_variance(model, pairs, seeds=[1, 2, 3], eval_size=32)
    values = []
    for s in (1, 2, 3):
        rec = evaluate(lambda im, _s=s: model(im, _s), pairs, eval_size=32)
        values.append(rec.rows[0].psnr_db)
    want = float(np.var(values))
    assert report.per_image[0]["psnr_variance"] == pytest.approx(want, abs=1e-12)


# ----------------------------------------------------- cross-dataset ------


class _TaggedModel:
    def __init__(self, tag):
        if tag is not None:
            self.dataset_tag = tag

    def __call__(self, img, seed):
        return img


def test_cross_dataset_eval_labels_train_and_test_tags(tmp_path):
    from deshadow.data import write_synthetic_dataset

    root = write_synthetic_dataset(tmp_path / "toyB", count=2, size=24, seed=4)
    record = cross_dataset_eval(
        _TaggedModel("toyA"), root, eval_size=32, out_dir=tmp_path / "rep"
    )
    assert record.label == "toyA->toyB"
    summary = json.loads((tmp_path / "rep" / "cross_eval_summary.json").read_text())
    assert summary["label"] == "toyA->toyB"
    assert (tmp_path / "rep" / "cross_eval.csv").exists()


def test_cross_dataset_eval_warns_on_missing_tag(tmp_path):
    from deshadow.data import write_synthetic_dataset

    root = write_synthetic_dataset(tmp_path / "toyB", count=2, size=24, seed=4)
    with pytest.warns(UserWarning, match="tag"):
        record = cross_dataset_eval(_TaggedModel(None), root, eval_size=32)
    assert record.label == "unknown->toyB"


def test_cross_dataset_eval_same_dataset_matches_evaluate(tmp_path):
    from deshadow.data import load_pair_dataset, write_synthetic_dataset

    root = write_synthetic_dataset(tmp_path / "toyA", count=2, size=24, seed=5)
    model = _TaggedModel("toyA")
    cross = cross_dataset_eval(model, root, seed=3, eval_size=32)
    plain = evaluate(
        lambda img: model(img, 3), load_pair_dataset(root, "test"), seed=3, eval_size=32
    )
    assert [r.psnr_db for r in cross.rows] == [r.psnr_db for r in plain.rows]
    assert [r.ssim for r in cross.rows] == [r.ssim for r in plain.rows]
    assert cross.mean_psnr == plain.mean_psnr
