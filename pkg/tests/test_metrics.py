import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from invkernel import metrics as M
from invkernel.dataset import generate_dataset, load_manifest
from invkernel.degrade import oracle_inverse
from invkernel.image_core import ShapeMismatch


def scalar_psnr(x, y):
    total = 0.0
    for a, b in zip(x.ravel().tolist(), y.ravel().tolist()):
        total += (a - b) ** 2
    return 10 * math.log10(1.0 / (total / x.size))


def reference_ssim(x, y):
    return structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=2)


def fixed_pairs():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(5):
        x = rng.random((24 + 4 * i, 20 + 3 * i, 3))
        y = np.clip(x + rng.normal(0, 0.02 * (i + 1), x.shape), 0, 1)
        out.append((x, y))
    return out


@pytest.mark.parametrize("k", range(5))
def test_against_reference_oracles(k):
    x, y = fixed_pairs()[k]
    assert abs(M.psnr(x, y) - scalar_psnr(x, y)) <= 1e-6
    assert abs(M.ssim(x, y) - reference_ssim(x, y)) <= 1e-4


def test_uniform_difference_gives_20_db():
    x = np.full((16, 16, 3), 0.3)
    assert M.psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)


def test_identical_images():
    x = np.random.default_rng(0).random((16, 16, 3))
    assert M.psnr(x, x.copy()) == math.inf
    assert M.format_psnr(M.psnr(x, x)) == "inf"
    assert M.ssim(x, x.copy()) == pytest.approx(1.0, abs=1e-12)


def test_inverted_image_is_anticorrelated():
    x = np.random.default_rng(1).random((32, 32, 1))
    s = M.ssim(x, 1 - x)
    assert s < 0
    assert s == pytest.approx(reference_ssim(x, 1 - x), abs=1e-4)


def test_y_mode_uses_luma():
    rng = np.random.default_rng(3)
    x, y = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    w = np.array([0.299, 0.587, 0.114])
    assert M.psnr(x, y, mode="y") == pytest.approx(scalar_psnr(x @ w, y @ w), abs=1e-9)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(4)
    x = rng.random((16, 16, 3))
    noise = rng.uniform(-1, 1, x.shape)
    vals = [M.psnr(x + a * noise, x) for a in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@given(st.floats(-0.2, 0.2), st.integers(0, 1000))
def test_ssim_shift_invariance(c, seed):
    # only near-invariant while local means agree, so no clipping and the
    # shifted pair stays inside [0, 1]
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.25, 0.75, (16, 16, 1))
    y = x + rng.normal(0, 0.03, x.shape)
    assert abs(M.ssim(x + c, y + c) - M.ssim(x, y)) < 1e-3


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        M.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ShapeMismatch):
        M.ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))


def test_evaluate_identity_and_report(tmp_path):
    man = generate_dataset("all", 3, (16, 16), 5, tmp_path / "d")
    rep = M.evaluate(man, mode="auto", report=tmp_path / "r.csv", restore_fn=lambda rec, d: d)
    for rec, row in zip(load_manifest(man), rep.rows):
        mode = "y" if rec.task_id == 0 else "rgb"
        assert row.psnr_db == M.psnr(rec.load_degraded(), rec.load_clean(), mode=mode)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,task,psnr_db,ssim"
    assert lines[-1].startswith("mean,") and len(lines) == 5


def test_evaluate_oracle_inverse_is_near_perfect(tmp_path):
    man = generate_dataset("rain", 3, (16, 16), 8, tmp_path / "d", rain_mode="gain", degraded_format="tensor")
    rep = M.evaluate(man, restore_fn=lambda rec, d: oracle_inverse(rec.affine(), d))
    assert min(r.psnr_db for r in rep.rows) >= 100


def test_evaluate_errors(tmp_path):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    with pytest.raises(ValueError):
        M.evaluate(empty, restore_fn=lambda r, d: d)
    man = generate_dataset("snow", 1, (16, 16), 0, tmp_path / "d")
    with pytest.raises(ValueError):
        M.evaluate(man)
    with pytest.raises(ValueError):
        M.evaluate(man, mode="lab", restore_fn=lambda r, d: d)
