import numpy as np
import pytest

from eventlf.aperture import ApertureSchedule, half_aperture_schedule, random_schedule
from eventlf.errors import SingularError, SizeError
from eventlf.lfcore import Layer, LightField, SceneSpec, psnr, synth_scene, synthetic_suite, view_psnr
from eventlf.recon import (ReconConfig, assemble_normal_matrix, cg_recon, cg_solve, image_only_recon,
                           least_norm_recon, least_norm_solve, objective_value, oracle_dense_solve,
                           recon_from_measurement)
from eventlf.sensor import Measurement, SensorConfig, coded_images, simulate_exposure

NO_SMOOTH = ReconConfig(lambda_tikhonov=1e-10, lambda_view_smooth=0.0, lambda_spatial_smooth=0.0,
                        cg_max_iter=2000, cg_tol=1e-13)


def view_constant_scene(seed, size=16):
    return synth_scene(SceneSpec([Layer(0.0, seed=seed)]), size, size)


def test_least_norm_recovers_view_constant_scene():
    lf = view_constant_scene(0)
    sched = random_schedule(1)
    est = least_norm_recon(coded_images(lf, sched), sched)
    assert psnr(lf, est) >= 60


def test_least_norm_tikhonov_limit():
    lf = synthetic_suite(1, 16, seed=8)[0]
    sched = random_schedule(8)
    y = coded_images(lf, sched)
    np.testing.assert_allclose(least_norm_solve(y, sched, 1e-9), least_norm_solve(y, sched), atol=1e-6)
    # data consistency: the estimate reproduces its observations
    np.testing.assert_allclose(coded_images(least_norm_solve(y, sched), sched), y, rtol=1e-9, atol=1e-9)


def test_least_norm_singular_and_zero():
    pats = random_schedule(2).patterns.copy()
    pats[1] = pats[0]
    sched = ApertureSchedule(pats, binary=True)
    with pytest.raises(SingularError):
        least_norm_solve(np.ones((4, 16, 16)), sched)
    assert np.all(least_norm_solve(np.ones((4, 16, 16)), sched, lambda_tikhonov=1e-3) >= 0)
    np.testing.assert_array_equal(least_norm_solve(np.zeros((4, 16, 16)), random_schedule(0)), 0.0)


def test_cg_without_smoothing_matches_least_norm():
    lf = synthetic_suite(1, 16, seed=3)[0]
    sched = random_schedule(4)
    y = coded_images(lf, sched)
    res = cg_recon(y, sched, NO_SMOOTH)
    assert res.converged
    np.testing.assert_allclose(res.x, least_norm_solve(y, sched), atol=1e-6)


@pytest.mark.parametrize("cfg", [
    ReconConfig(cg_tol=1e-12, cg_max_iter=5000),
    ReconConfig(1e-3, 1e-1, 1e-2, cg_tol=1e-12, cg_max_iter=5000),
    ReconConfig(0.0, 1e-2, 0.0, cg_tol=1e-12, cg_max_iter=5000),
])
def test_cg_matches_dense_oracle(cfg):
    rng = np.random.default_rng(5)
    lf = rng.random((8, 8, 8, 8))
    sched = random_schedule(6)
    y = coded_images(lf, sched)
    np.testing.assert_allclose(cg_recon(y, sched, cfg).x, oracle_dense_solve(y, sched, cfg), atol=1e-6)


def test_normal_matrix_matches_objective_hessian():
    # x'Hx - 2b'x + y'y equals the objective for random x
    rng = np.random.default_rng(1)
    sched = random_schedule(1)
    cfg = ReconConfig(1e-3, 2e-2, 3e-3)
    shape = (4, 5, 8, 8)
    y = rng.random((4, 4, 5))
    x = rng.random(shape)
    H = assemble_normal_matrix(sched.sensing_matrix(), shape, cfg)
    A = sched.sensing_matrix()
    b = np.einsum("kp,kxy->xyp", A, y).ravel()
    quad = x.ravel() @ (H @ x.ravel()) - 2 * b @ x.ravel() + np.sum(y * y)
    assert quad == pytest.approx(objective_value(A, y, x, cfg), rel=1e-10)


def test_oracle_ridge_limit_and_size_cap():
    sched = random_schedule(0)
    y = np.random.default_rng(0).random((4, 4, 4)) * 64
    big = ReconConfig(lambda_tikhonov=1e12, lambda_view_smooth=0, lambda_spatial_smooth=0)
    assert np.abs(oracle_dense_solve(y, sched, big)).max() < 1e-6
    with pytest.raises(SizeError):
        oracle_dense_solve(np.zeros((4, 17, 17)), sched)
    assert oracle_dense_solve(np.zeros((4, 16, 16)), sched).shape == (16, 16, 8, 8)


def test_cg_objective_trace_non_increasing():
    lf = synthetic_suite(1, 16, seed=1)[0]
    sched = random_schedule(2)
    y = coded_images(lf, sched)
    res = cg_recon(y, sched, ReconConfig())
    t = np.array(res.objective_trace)
    assert np.all(np.diff(t) <= 1e-9 * abs(t[0]))
    assert t[-1] == pytest.approx(objective_value(sched.sensing_matrix(), y, res.x, ReconConfig()), rel=1e-8)


def test_view_smoothing_helps_view_constant_scenes():
    # without complementary pairs the all-ones view vector leaves the row span,
    # so only the view prior can pull the estimate back to constant views
    for seed in range(3):
        lf = view_constant_scene(seed)
        sched = random_schedule(seed, complementary=False)
        y = coded_images(lf, sched)
        smooth = cg_recon(y, sched, ReconConfig(cg_max_iter=2000)).lightfield
        assert view_psnr(lf, smooth) >= view_psnr(lf, least_norm_recon(y, sched)) + 10


def test_image_only_is_view_constant_frame_share():
    lf = synthetic_suite(1, 16, seed=2)[0]
    sched = random_schedule(3)
    frame = coded_images(lf, sched).sum(axis=0)
    est = image_only_recon(frame, sched, NO_SMOOTH)
    want = frame / (2 * 64)
    for u in range(8):
        for v in range(8):
            np.testing.assert_allclose(est.view(u, v), want, atol=1e-8)


def test_image_only_zero_frame():
    est = image_only_recon(np.zeros((16, 16)), random_schedule(0))
    np.testing.assert_array_equal(est.data, 0.0)


def test_image_only_view_variance_vanishes_without_spatial_prior():
    lf = synthetic_suite(1, 16, seed=4)[0]
    sched = random_schedule(4)
    frame = coded_images(lf, sched).sum(axis=0)
    cfg = ReconConfig(lambda_spatial_smooth=0.0, cg_tol=1e-12, cg_max_iter=1000)
    est = image_only_recon(frame, sched, cfg).data
    assert est.reshape(16, 16, -1).var(axis=2).max() < 1e-18


def test_continuous_pipeline_recovers_view_constant_scene():
    lf = view_constant_scene(7)
    sched = random_schedule(7)
    cfg = SensorConfig(sigma_tau=0.0, sigma_frame=0.0)
    m = simulate_exposure(lf, sched, cfg, quantized=False)
    est = recon_from_measurement(m, sched, cfg.tau, ReconConfig(), epsilon=cfg.epsilon)
    assert psnr(lf, est) >= 60


def test_zero_stacks_reduce_to_image_only():
    lf = synthetic_suite(1, 16, seed=5)[0]
    sched = random_schedule(5)
    m = simulate_exposure(lf, sched, SensorConfig())
    blank = Measurement(m.frame, np.zeros_like(m.stacks), 0, m.scale, m.tau)
    a = recon_from_measurement(blank, sched).data
    b = image_only_recon(m.frame, sched).data
    np.testing.assert_array_equal(a, b)


def test_quantized_pipeline_beats_image_only_on_suite():
    scenes = synthetic_suite(4, 32, seed=1)
    sched = half_aperture_schedule()
    ours, frame_only = [], []
    for i, lf in enumerate(scenes):
        cfg = SensorConfig(rng_seed=i)
        m = simulate_exposure(lf, sched, cfg)
        ours.append(view_psnr(lf, recon_from_measurement(m, sched, cfg.tau)))
        frame_only.append(view_psnr(lf, image_only_recon(m.frame, sched)))
    assert np.mean(ours) >= np.mean(frame_only)


def test_per_pixel_rows_reduce_to_shared_rows():
    rng = np.random.default_rng(0)
    sched = random_schedule(0)
    y = rng.random((4, 6, 6)) * 30
    shared = cg_solve(sched.sensing_matrix(), y, (8, 8), ReconConfig(cg_tol=1e-12))
    rows = np.broadcast_to(sched.sensing_matrix(), (6, 6, 4, 64))
    per_pixel = cg_solve(rows, y, (8, 8), ReconConfig(cg_tol=1e-12))
    np.testing.assert_allclose(per_pixel.x, shared.x, atol=1e-7)
