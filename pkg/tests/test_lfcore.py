import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from skimage.metrics import structural_similarity

from eventlf.errors import IoError, MissingView, ShapeError, SpecError
from eventlf.lfcore import (Layer, LightField, SceneSpec, epi_slice, load_lightfield, psnr, quality_report,
                            save_lightfield, ssim, synth_scene, synthetic_suite, view_psnr)


def _bilinear_clamped(img, x, y):
    """Scalar bilinear lookup with edge clamping, written out by hand."""
    X, Y = img.shape
    x = min(max(x, 0.0), X - 1.0)
    y = min(max(y, 0.0), Y - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, X - 1), min(y0 + 1, Y - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[x0, y0] + fx * (1 - fy) * img[x1, y0]
            + (1 - fx) * fy * img[x0, y1] + fx * fy * img[x1, y1])


def _render_oracle(layers, X, Y, n_u=8, n_v=8):
    """Per-ray renderer: shift each (texture, alpha, disparity) layer and composite back to front."""
    out = np.zeros((X, Y, n_u, n_v))
    c_u, c_v = (n_u - 1) / 2, (n_v - 1) / 2
    for u in range(n_u):
        for v in range(n_v):
            for x in range(X):
                for y in range(Y):
                    val = 0.0
                    for tex, alpha, d in layers:
                        sx, sy = x - d * (u - c_u), y - d * (v - c_v)
                        a = _bilinear_clamped(alpha, sx, sy)
                        val = val * (1 - a) + a * _bilinear_clamped(tex, sx, sy)
                    out[x, y, u, v] = val
    return out


def test_lightfield_rejects_out_of_range():
    with pytest.raises(ValueError):
        LightField(np.full((4, 4, 2, 2), 1.5))
    with pytest.raises(ShapeError):
        LightField(np.zeros((4, 4, 2)))
    lf = LightField.from_array(np.full((4, 4, 2, 2), 1.5))
    assert lf.data.max() == 1.0


def test_lightfield_is_read_only():
    lf = LightField(np.zeros((4, 4, 2, 2)))
    with pytest.raises(ValueError):
        lf.data[0, 0, 0, 0] = 1.0


def test_directory_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    data = np.round(rng.random((16, 20, 8, 8)) * 255) / 255
    save_lightfield(LightField(data), tmp_path)
    back = load_lightfield(tmp_path)
    assert back.shape == (16, 20, 8, 8)
    np.testing.assert_array_equal(back.data, data)


def test_missing_view(tmp_path):
    save_lightfield(LightField(np.zeros((16, 16, 8, 8))), tmp_path)
    (tmp_path / "view_3_5.png").unlink()
    with pytest.raises(MissingView) as info:
        load_lightfield(tmp_path)
    assert (info.value.u, info.value.v) == (3, 5)


def test_inconsistent_view_size(tmp_path):
    save_lightfield(LightField(np.zeros((16, 16, 8, 8))), tmp_path)
    Image.fromarray(np.zeros((16, 17), dtype=np.uint8)).save(tmp_path / "view_8_8.png")
    with pytest.raises(ShapeError):
        load_lightfield(tmp_path)


def test_corrupt_view(tmp_path):
    save_lightfield(LightField(np.zeros((16, 16, 8, 8))), tmp_path)
    (tmp_path / "view_2_2.png").write_bytes(b"not a png")
    with pytest.raises(IoError):
        load_lightfield(tmp_path)


def test_single_layer_zero_disparity_is_view_constant():
    tex = np.linspace(0.1, 0.9, 16 * 16).reshape(16, 16)
    lf = synth_scene(SceneSpec([Layer(0.0, texture=tex)]), 16, 16)
    for u in range(8):
        for v in range(8):
            np.testing.assert_array_equal(lf.view(u, v), tex)


def test_two_layer_scene_matches_per_ray_renderer():
    X = Y = 16
    rng = np.random.default_rng(3)
    back, front = rng.random((X, Y)), rng.random((X, Y))
    alpha = np.zeros((X, Y))
    alpha[4:12, 5:11] = 1.0
    spec = SceneSpec([Layer(-1.25, texture=back), Layer(2.0, texture=front, opacity=alpha)])
    got = synth_scene(spec, X, Y).data
    want = _render_oracle([(back, np.ones((X, Y)), -1.25), (front, alpha, 2.0)], X, Y)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_integer_disparity_is_a_pure_shift():
    tex = np.random.default_rng(1).random((20, 20))
    lf = synth_scene(SceneSpec([Layer(1.0, texture=tex)]), 20, 20)
    # views u and u+1 differ by exactly one pixel of shift away from the edges
    np.testing.assert_allclose(lf.view(4, 4)[6:15, 3:17], lf.view(3, 4)[5:14, 3:17], atol=1e-12)


@pytest.mark.parametrize("spec,size", [
    (SceneSpec([]), 16),
    (SceneSpec([Layer(0.0)]), 15),
    (SceneSpec([Layer(float("nan"))]), 16),
    (SceneSpec([Layer(0.0, opacity="star")]), 16),
])
def test_synth_scene_errors(spec, size):
    with pytest.raises(SpecError):
        synth_scene(spec, size, size)


def test_psnr_examples():
    a = np.zeros((8, 8))
    assert psnr(a, np.full((8, 8), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == 99.0
    with pytest.raises(ShapeError):
        psnr(a, np.zeros((8, 9)))


def test_view_psnr_averages_per_view_db():
    ref = np.zeros((4, 4, 1, 2))
    est = ref.copy()
    est[..., 0, 0] = 0.1
    est[..., 0, 1] = 0.01
    assert view_psnr(ref, est) == pytest.approx((20 + 40) / 2)


def test_ssim_of_constant_images_matches_scalar_formula():
    c1, c2 = 1e-4, 9e-4
    got = ssim(np.zeros((32, 32)), np.ones((32, 32)))
    want = (c1 * c2) / ((1 + c1) * c2)
    assert got == pytest.approx(want, rel=1e-9)
    assert got == pytest.approx(1e-4, rel=1e-3)


def test_ssim_matches_skimage_gaussian_variant():
    rng = np.random.default_rng(7)
    a = rng.random((40, 36))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_small_noise_close_to_one():
    a = synthetic_suite(1, 32, seed=2)[0].view(0, 0)
    b = a + np.random.default_rng(0).normal(0, 1e-3, a.shape)
    assert ssim(a, np.clip(b, 0, 1)) > 0.99


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0, 1)), arrays(np.float64, (16, 16), elements=st.floats(0, 1)))
def test_metric_symmetry_and_identity(a, b):
    assert psnr(a, b) == pytest.approx(psnr(b, a))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) <= 1.0 + 1e-12


def test_quality_report_fields():
    lf = synthetic_suite(1, 16, seed=0)[0]
    est = LightField(np.clip(lf.data + 0.01, 0, 1))
    q = quality_report(lf, est)
    assert len(q.per_view) == 8 and len(q.per_view[0]) == 8
    rec = q.to_record("s")
    assert set(rec) == {"scene", "psnr_db", "psnr_global_db", "ssim", "per_view"}
    assert q.psnr_global == pytest.approx(psnr(lf, est))


def test_epi_slice_of_constant_disparity_scene_has_slope():
    tex = np.random.default_rng(5).random((24, 24))
    lf = synth_scene(SceneSpec([Layer(1.0, texture=tex)]), 24, 24)
    epi = epi_slice(lf, 10, 3)
    assert epi.shape == (24, 8)
    # a feature at x in view u sits at x + 1 in view u + 1
    np.testing.assert_allclose(epi[8:16, 4], epi[7:15, 3], atol=1e-12)


def test_epi_slice_bounds():
    lf = LightField(np.zeros((16, 16, 8, 8)))
    with pytest.raises(IndexError):
        epi_slice(lf, 16, 0)
    with pytest.raises(IndexError):
        epi_slice(lf, 0, -1)


def test_synthetic_suite_is_deterministic():
    a = synthetic_suite(3, 16, seed=4)
    b = synthetic_suite(3, 16, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
