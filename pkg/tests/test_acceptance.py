"""End-to-end acceptance checks, one test per criterion.

Each test prints ``criterion <n>: PASS|FAIL <detail>``; the lines are also
repeated in the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from eventlf.aperture import half_aperture_schedule, random_schedule
from eventlf.equivalence import quantization_error_bound, recover_images
from eventlf.harness import evaluate_methods, segment_stream, tau_sweep
from eventlf.lfcore import LightField, Layer, SceneSpec, psnr, synth_scene, synthetic_suite
from eventlf.patopt import EventBudget, ObjectiveEvaluator, OptConfig, anneal, event_penalty, random_baseline
from eventlf.recon import ReconConfig, cg_recon, least_norm_recon, oracle_dense_solve
from eventlf.sensor import (EventStream, SensorConfig, TimingConfig, coded_images, event_stack, quantize,
                            simulate_event_stream, simulate_exposure)

NOISELESS = SensorConfig(sigma_tau=0.0, sigma_frame=0.0)


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def random_suite():
    """100 random 16x16x8x8 light fields, each with its own complementary schedule."""
    return [(LightField(np.random.default_rng(i).random((16, 16, 8, 8))), random_schedule(1000 + i))
            for i in range(100)]


def test_criterion_1_exact_inverse(random_suite):
    t0 = time.perf_counter()
    worst = 0.0
    for lf, sched in random_suite:
        m = simulate_exposure(lf, sched, NOISELESS, quantized=False)
        true = coded_images(lf, sched) / m.scale
        rec = recover_images(m.frame / m.scale, m.stacks, NOISELESS.tau, epsilon=NOISELESS.epsilon).images
        worst = max(worst, float(np.max(np.abs(rec - true) / np.abs(true))))
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-10 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.2f} s")


def test_criterion_2_quantized_bound(random_suite):
    cfg = SensorConfig(tau=0.15, sigma_tau=0.0, sigma_frame=0.0)
    bound = quantization_error_bound(4, 0.15)
    violations, lo, hi = 0, np.inf, 0.0
    for lf, sched in random_suite:
        m = simulate_exposure(lf, sched, cfg)
        true = coded_images(lf, sched) / m.scale + cfg.epsilon
        rec = recover_images(m.frame / m.scale, m.stacks, cfg.tau, epsilon=cfg.epsilon).images + cfg.epsilon
        ratio = rec / true
        violations += int(np.sum((ratio > bound * (1 + 1e-12)) | (ratio < (1 - 1e-12) / bound)))
        lo, hi = min(lo, ratio.min()), max(hi, ratio.max())
    assert bound == pytest.approx(math.exp(0.45), rel=1e-15)
    record(2, violations == 0, f"ratio range [{lo:.4f}, {hi:.4f}] vs bound {bound:.4f}, {violations} violations")


def test_criterion_3_quantizer():
    checks = [bool(quantize(0.9) == 0), bool(quantize(1.0) == 1), bool(quantize(-2.5) == -2)]
    e = event_stack(np.array([[0.09]]), np.array([[0.19]]), SensorConfig(tau=0.15, epsilon=0.01, sigma_tau=0.0))
    checks.append(bool(e[0, 0] == 4))
    record(3, all(checks), f"Q(0.9), Q(1.0), Q(-2.5), worked example -> {checks}")


def test_criterion_4_oracle_equivalence():
    settings = [
        (1e-3, 1e-2, 1e-3),
        (1e-6, 0.0, 0.0),
        (1e-2, 1e-1, 1e-2),
        (0.0, 1e-2, 0.0),
        (1e-4, 0.0, 1e-2),
    ]
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(400 + i)
        lf = rng.random((8, 8, 8, 8))
        sched = random_schedule(400 + i)
        y = coded_images(lf, sched)
        cfg = ReconConfig(*settings[i % len(settings)], cg_tol=1e-12, cg_max_iter=20_000)
        worst = max(worst, float(np.max(np.abs(cg_recon(y, sched, cfg).x - oracle_dense_solve(y, sched, cfg)))))
    elapsed = time.perf_counter() - t0
    record(4, worst <= 1e-6 and elapsed < 60, f"max |cg - oracle| {worst:.2e}, {elapsed:.1f} s")


def test_criterion_5_view_constant_recovery():
    vals = []
    for i in range(10):
        lf = synth_scene(SceneSpec([Layer(0.0, seed=500 + i)]), 16, 16)
        sched = random_schedule(500 + i)
        vals.append(psnr(lf, least_norm_recon(coded_images(lf, sched), sched)))
    record(5, min(vals) >= 60, f"min PSNR {min(vals):.1f} dB")


@pytest.fixture(scope="module")
def ordering_suite():
    return synthetic_suite(10, 32, seed=1)


def test_criterion_6_ordering(ordering_suite):
    sched = half_aperture_schedule()
    errs = {"ca": [], "ours": [], "image_only": []}
    for i, lf in enumerate(ordering_suite):
        _, _, est = evaluate_methods(lf, sched, SensorConfig(tau=0.15, rng_seed=i), ReconConfig(), list(errs), i)
        for k in errs:
            errs[k].append(float(np.mean((est[k].data - lf.data) ** 2)))
    ca, ours, img = (float(np.mean(errs[k])) for k in ("ca", "ours", "image_only"))
    record(6, ca <= ours <= img, f"mean MSE ca {ca:.3e} <= ours {ours:.3e} <= image_only {img:.3e}")


def test_criterion_7_tau_sweep(ordering_suite):
    curve = tau_sweep(ordering_suite, half_aperture_schedule(), [0.075, 0.15, 0.3], SensorConfig(rng_seed=0))
    p = [v for _, v in curve]
    ok = p[0] >= p[1] - 0.1 and p[1] >= p[2] - 0.1
    record(7, ok, "mean PSNR " + ", ".join(f"tau={t}: {v:.2f} dB" for t, v in curve))


def test_criterion_8_event_budget():
    assert event_penalty(131_230, EventBudget(lam=1e-5, theta=131_130)) == 1e-3
    scenes = synthetic_suite(2, 16, seed=8)
    cfg = OptConfig(iterations=60, initial_temperature=1e-4, cooling_rate=0.97, scenes=scenes, rng_seed=8)
    init = random_schedule(8)
    probe = ObjectiveEvaluator(scenes, cfg, EventBudget(lam=1e-5)).evaluate(init)
    # set theta so the random initial schedule overshoots the scaled budget by half
    scaled = 0.5 * probe.n_event
    budget = EventBudget(lam=1e-5, theta=131_130 * scaled / probe.theta)
    res = anneal(init, cfg, budget)
    best = res.best
    # independent recount of the events the returned schedule produces
    ev = ObjectiveEvaluator(scenes, cfg, budget)
    n_event = sum(int(simulate_exposure(d, res.schedule, s).n_event) for d, s in zip(scenes, ev.sensor_cfgs))
    active = probe.n_event > budget.theta_for(ev.n_pixels)
    within = n_event <= best.theta
    penalty_ok = best.penalty == pytest.approx(1e-5 * max(n_event - best.theta, 0.0), rel=1e-12, abs=0)
    ok = active and n_event == best.n_event and (within or (best.penalty > 0 and penalty_ok))
    record(8, ok, f"theta {best.theta:.0f}, init events {probe.n_event}, returned events {n_event}, "
                  f"penalty {best.penalty:.3e}")


def _identifiable(m):
    # a transition that fires (almost) nothing looks like the silent wrap slot
    return np.abs(m.stacks).sum(axis=(1, 2)).min() >= 5


def test_criterion_9_segmentation():
    timing = TimingConfig()
    ok, checked, skipped, worst = True, 0, 0, 0
    for n_cycles in range(1, 6):
        for seed in range(10):
            lf = synthetic_suite(1, 16, seed=900 + seed)[0]
            sched = random_schedule(900 + seed)
            cfg = SensorConfig(rng_seed=seed)
            m = simulate_exposure(lf, sched, cfg)
            if not _identifiable(m):
                skipped += 1
                continue
            stream = simulate_event_stream(lf, sched, timing, cfg, n_cycles=n_cycles, measurement=m)
            rng = np.random.default_rng(seed)
            k = max(len(stream) // 10, 1)
            noise = EventStream(rng.integers(0, n_cycles * timing.exposure_us, k), rng.integers(0, 16, k),
                                rng.integers(0, 16, k), rng.choice([-1, 1], k), (16, 16), stream.t_end_us)
            for noisy, s in ((False, stream), (True, stream.concat(noise))):
                seg = segment_stream(s, timing)
                checked += 1
                ok &= seg.n_cycles == n_cycles
                if not ok:
                    continue
                want = [timing.burst_start_us(c, j) for c in range(n_cycles) for j in (1, 2, 3)]
                err = int(np.max(np.abs(np.array(seg.onsets_us) - want)))
                worst = max(worst, err)
                ok &= err <= 200
                if not noisy:
                    ok &= all(np.array_equal(seg.stacks[c], m.stacks) for c in range(n_cycles))
    ok &= timing.exposure == pytest.approx(21.736, abs=1e-12)
    record(9, ok, f"{checked} streams, worst onset error {worst} us, {skipped} unidentifiable skipped, "
                  f"exposure {timing.exposure:.3f} ms")


def test_criterion_10_optimizer_efficacy():
    t0 = time.perf_counter()
    train = synthetic_suite(4, 24, seed=10)
    held = synthetic_suite(4, 24, seed=20)
    budget = EventBudget()
    cfg = OptConfig(iterations=300, initial_temperature=2e-4, cooling_rate=0.99, scenes=train, rng_seed=10)
    res = anneal(random_schedule(10), cfg, budget)
    held_eval = ObjectiveEvaluator(held, OptConfig(scenes=held, rng_seed=20), budget)
    ours = held_eval.evaluate(res.schedule).objective
    baseline = float(np.median([held_eval.evaluate(s).objective for s in random_baseline(20, seed=5)]))
    elapsed = time.perf_counter() - t0
    record(10, ours <= baseline and elapsed < 300,
           f"held-out objective {ours:.4e} vs random median {baseline:.4e}, {elapsed:.0f} s")
