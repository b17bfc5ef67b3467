"""Search over binary complementary aperture schedules.

The loss is the reconstruction MSE of the single-exposure pipeline plus a hinge
penalty on the event count. Simulated annealing flips one element of a free
pattern at a time (its complement follows), and the evaluator updates cached
coded images with a rank-1 correction instead of re-projecting each scene.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .aperture import ApertureSchedule, random_schedule, validate
from .errors import ConfigError
from .lfcore import _as_array
from .recon import ReconConfig, recon_from_measurement
from .sensor import SensorConfig, coded_images, measure_images

# pixels in one training batch of the reference setup: 16 crops of 64x64
REFERENCE_BATCH_PIXELS = 16 * 64 * 64


@dataclass(frozen=True)
class EventBudget:
    lam: float = 1e-5
    theta: float = 131_130
    reference_pixels: int | None = REFERENCE_BATCH_PIXELS

    def __post_init__(self):
        if self.lam < 0 or self.theta < 0:
            raise ValueError("lambda and theta must be non-negative")

    def theta_for(self, n_pixels: int) -> float:
        """Threshold rescaled to an evaluation set of ``n_pixels`` pixels."""
        if self.reference_pixels is None:
            return float(self.theta)
        return float(self.theta) * n_pixels / self.reference_pixels


def event_penalty(n_event, budget: EventBudget, theta: float | None = None) -> float:
    theta = budget.theta if theta is None else theta
    return budget.lam * max(float(n_event) - theta, 0.0)


@dataclass
class OptConfig:
    iterations: int = 200
    initial_temperature: float = 1e-4
    cooling_rate: float = 0.98
    scenes: list = field(default_factory=list)
    tau_range: tuple = (0.075, 0.3)
    rng_seed: int = 0
    sensor: SensorConfig = field(default_factory=SensorConfig)
    recon: ReconConfig = field(default_factory=lambda: ReconConfig(cg_max_iter=200, cg_tol=1e-6))

    def __post_init__(self):
        lo, hi = self.tau_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"tau_range must lie within (0, 1], got {self.tau_range}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not (0 < self.cooling_rate <= 1):
            raise ConfigError("cooling_rate must be in (0, 1]")


class Evaluation(NamedTuple):
    objective: float
    mse: float
    n_event: int
    penalty: float
    theta: float


class ObjectiveEvaluator:
    """Scores schedules on a fixed scene set with common random numbers.

    The contrast threshold of every scene is drawn once from ``tau_range``
    and each scene has its own noise seed, so the objective is a
    deterministic function of the schedule.
    """

    def __init__(self, scenes, cfg: OptConfig, budget: EventBudget):
        if not scenes:
            raise ConfigError("objective needs at least one scene")
        self.data = [_as_array(s) for s in scenes]
        self.budget = budget
        self.recon_cfg = cfg.recon
        lo, hi = cfg.tau_range
        self.sensor_cfgs = []
        for i in range(len(self.data)):
            ss = np.random.SeedSequence(cfg.rng_seed, spawn_key=(i,))
            tau = float(np.random.default_rng(ss).uniform(lo, hi)) if hi > lo else float(lo)
            seed = int(ss.generate_state(1)[0])
            self.sensor_cfgs.append(replace(cfg.sensor, tau=tau, rng_seed=seed))
        self.n_pixels = sum(d.shape[0] * d.shape[1] for d in self.data)
        self.theta = budget.theta_for(self.n_pixels)
        self.sched = None
        self._images = None

    @property
    def taus(self):
        return [c.tau for c in self.sensor_cfgs]

    def set_schedule(self, sched: ApertureSchedule) -> None:
        self.sched = sched
        self._images = [coded_images(d, sched) for d in self.data]

    def flip(self, k: int, u: int, v: int) -> None:
        """Flip element (u, v) of pattern ``k``; its complement partner follows."""
        pats = np.array(self.sched.patterns)
        delta = 1.0 - 2.0 * pats[k, u, v]
        pats[k, u, v] += delta
        partner = k + 1 if self.sched.complementary else None
        if partner is not None:
            pats[partner, u, v] -= delta
        self.sched = self.sched.with_patterns(pats)
        for d, imgs in zip(self.data, self._images):
            view = d[:, :, u, v]
            imgs[k] += delta * view
            if partner is not None:
                imgs[partner] -= delta * view

    def coded(self, i: int) -> np.ndarray:
        return self._images[i]

    def evaluate(self, sched: ApertureSchedule | None = None) -> Evaluation:
        if sched is not None:
            self.set_schedule(sched)
        errs, n_event = [], 0
        for d, imgs, scfg in zip(self.data, self._images, self.sensor_cfgs):
            scale = float(d.shape[2] * d.shape[3])
            m = measure_images(imgs, scfg, scale)
            n_event += int(m.n_event)
            est = recon_from_measurement(m, self.sched, scfg.tau, self.recon_cfg, epsilon=scfg.epsilon)
            errs.append(float(np.mean((est.data - d) ** 2)))
        mse = float(np.mean(errs))
        pen = event_penalty(n_event, self.budget, self.theta)
        return Evaluation(mse + pen, mse, n_event, pen, self.theta)


def objective(sched: ApertureSchedule, scenes, cfg: OptConfig, budget: EventBudget) -> float:
    """Mean reconstruction MSE over ``scenes`` plus the event penalty."""
    violations = validate(sched)
    if violations:
        raise ValueError(f"invalid schedule: {violations[:5]}")
    return ObjectiveEvaluator(scenes, cfg, budget).evaluate(sched).objective


class Coherence(NamedTuple):
    value: float
    degenerate: bool


def coherence_surrogate(sched: ApertureSchedule) -> Coherence:
    """Largest |cosine| between distinct pattern rows; lower is better."""
    A = sched.sensing_matrix()
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0):
        return Coherence(1.0, True)
    G = np.abs((A / norms[:, None]) @ (A / norms[:, None]).T)
    np.fill_diagonal(G, 0.0)
    return Coherence(float(min(G.max(), 1.0)), False)


@dataclass
class AnnealResult:
    schedule: ApertureSchedule
    best: Evaluation
    trace: list  # rows (iter, objective, best_objective, temperature)

    @property
    def best_objective(self) -> float:
        return self.best.objective

    @property
    def within_budget(self) -> bool:
        return self.best.n_event <= self.best.theta

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "best_objective", "temperature"])
            for it, obj, best, temp in self.trace:
                w.writerow([it, repr(obj), repr(best), repr(temp)])


def anneal(init: ApertureSchedule, cfg: OptConfig, budget: EventBudget = EventBudget(),
           evaluator: ObjectiveEvaluator | None = None) -> AnnealResult:
    """Simulated annealing over single-element flips; returns the best schedule seen."""
    violations = validate(init)
    if violations:
        raise ValueError(f"initial schedule is invalid: {violations[:5]}")
    ev = evaluator if evaluator is not None else ObjectiveEvaluator(cfg.scenes, cfg, budget)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed, spawn_key=(10_000,)))

    current = ev.evaluate(init)
    best, best_sched = current, init
    temp = cfg.initial_temperature
    trace = [(0, current.objective, best.objective, temp)]
    free = list(range(0, init.n, 2)) if init.complementary else list(range(init.n))
    U, V = init.pattern_shape

    for it in range(1, cfg.iterations + 1):
        k = int(free[rng.integers(len(free))])
        u, v = int(rng.integers(U)), int(rng.integers(V))
        ev.flip(k, u, v)
        cand = ev.evaluate()
        delta = cand.objective - current.objective
        if delta <= 0 or (temp > 0 and rng.random() < np.exp(-delta / temp)):
            current = cand
            if cand.objective < best.objective:
                best, best_sched = cand, ev.sched
        else:
            ev.flip(k, u, v)
        trace.append((it, cand.objective, best.objective, temp))
        temp *= cfg.cooling_rate
    return AnnealResult(best_sched, best, trace)


def random_baseline(n: int, seed: int = 0) -> list:
    """``n`` random binary complementary schedules with distinct seeds."""
    return [random_schedule(np.random.SeedSequence(seed, spawn_key=(i,))) for i in range(n)]
