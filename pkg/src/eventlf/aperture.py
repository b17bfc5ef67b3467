"""Aperture coding patterns and their hardware constraints.

A schedule holds ``N`` patterns of shape ``(U, V)`` (8x8 by default). Binary
schedules use only 0/1 transmittance; complementary schedules pair pattern
``2k`` with ``1 - pattern[2k]`` (1-based pairs (1, 2), (3, 4), ...), which is
the DC balance the LCoS display needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import SeedError, ShapeError

DEFAULT_N = 4
DEFAULT_SHAPE = (8, 8)


@dataclass(frozen=True)
class ApertureSchedule:
    patterns: np.ndarray  # (N, U, V)
    binary: bool = False
    complementary: bool = False

    def __post_init__(self):
        arr = np.array(self.patterns, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ShapeError(f"patterns must have shape (N, U, V), got {arr.shape}")
        if arr.shape[0] < 2:
            raise ShapeError("a schedule needs at least two patterns")
        if self.complementary and arr.shape[0] % 2:
            raise ShapeError("complementary schedules need an even number of patterns")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pattern entries must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "patterns", arr)

    @property
    def n(self) -> int:
        return self.patterns.shape[0]

    @property
    def pattern_shape(self):
        return self.patterns.shape[1:]

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self.patterns[i]

    def sensing_matrix(self) -> np.ndarray:
        """Rows are the flattened patterns, shape ``(N, U*V)``."""
        return self.patterns.reshape(self.n, -1).copy()

    def with_patterns(self, patterns) -> "ApertureSchedule":
        return ApertureSchedule(patterns, binary=self.binary, complementary=self.complementary)

    # JSON: {n, patterns: [[row-major floats] ...], binary, complementary}
    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "shape": list(self.pattern_shape),
            "patterns": [[float(x) for x in p.ravel()] for p in self.patterns],
            "binary": bool(self.binary),
            "complementary": bool(self.complementary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApertureSchedule":
        shape = tuple(d.get("shape", DEFAULT_SHAPE))
        pats = np.asarray(d["patterns"], dtype=np.float64)
        if pats.shape[0] != d.get("n", pats.shape[0]):
            raise ShapeError(f"'n'={d['n']} but {pats.shape[0]} patterns given")
        return cls(pats.reshape((-1,) + shape), binary=bool(d.get("binary", False)),
                   complementary=bool(d.get("complementary", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ApertureSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ScheduleSeed:
    alpha: np.ndarray
    beta: np.ndarray
    s: float = 1.0


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def scale_at_epoch(epoch: int, start: float = 1.0, factor: float = 1.02) -> float:
    """Annealed sigmoid scale: starts at 1 and grows by 2% per epoch."""
    return start * factor**epoch


def schedule_from_seeds(seed: ScheduleSeed) -> ApertureSchedule:
    alpha = np.asarray(seed.alpha, dtype=np.float64)
    beta = np.asarray(seed.beta, dtype=np.float64)
    if not (np.isfinite(seed.s) and seed.s > 0):
        raise SeedError(f"scale s must be positive and finite, got {seed.s}")
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
        raise SeedError("alpha and beta must be finite")
    if alpha.shape != beta.shape or alpha.ndim != 2:
        raise SeedError(f"alpha {alpha.shape} and beta {beta.shape} must be matching 2-D arrays")
    a1 = sigmoid(seed.s * alpha)
    a3 = sigmoid(seed.s * beta)
    return ApertureSchedule(np.stack([a1, 1.0 - a1, a3, 1.0 - a3]), complementary=True)


def binarize(sched: ApertureSchedule) -> ApertureSchedule:
    """Threshold at 0.5 (ties go to 1); complements are recomputed from their partners."""
    pats = (sched.patterns >= 0.5).astype(np.float64)
    if sched.complementary:
        pats[1::2] = 1.0 - pats[0::2]
    return ApertureSchedule(pats, binary=True, complementary=sched.complementary)


def brightness(pattern) -> float:
    return float(np.sum(pattern))


@dataclass(frozen=True)
class BinaryViolation:
    pattern: int
    u: int
    v: int


@dataclass(frozen=True)
class ComplementViolation:
    pattern: int  # index of the second member of the pair
    u: int
    v: int


def validate(sched: ApertureSchedule) -> list:
    """List constraint violations; an empty list means the schedule is valid."""
    out = []
    pats = sched.patterns
    if sched.binary:
        for n, u, v in zip(*np.nonzero((pats != 0.0) & (pats != 1.0))):
            out.append(BinaryViolation(int(n), int(u), int(v)))
    if sched.complementary:
        if sched.n % 2:
            out.append(ComplementViolation(sched.n - 1, -1, -1))
        else:
            bad = pats[1::2] != 1.0 - pats[0::2]
            for k, u, v in zip(*np.nonzero(bad)):
                out.append(ComplementViolation(int(2 * k + 1), int(u), int(v)))
    return out


def random_schedule(rng_seed, binary: bool = True, complementary: bool = True,
                    n: int = DEFAULT_N, shape=DEFAULT_SHAPE) -> ApertureSchedule:
    """Uniformly random binary schedule, deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    if complementary:
        free = rng.integers(0, 2, size=(n // 2,) + tuple(shape)).astype(np.float64)
        pats = np.empty((n,) + tuple(shape))
        pats[0::2] = free
        pats[1::2] = 1.0 - free
    else:
        pats = rng.integers(0, 2, size=(n,) + tuple(shape)).astype(np.float64)
    return ApertureSchedule(pats, binary=binary, complementary=complementary)


def constant_schedule(pattern, n: int = DEFAULT_N) -> ApertureSchedule:
    """Degenerate schedule repeating one pattern ``n`` times."""
    pattern = np.asarray(pattern, dtype=np.float64)
    return ApertureSchedule(np.repeat(pattern[None], n, axis=0),
                            binary=bool(np.all((pattern == 0) | (pattern == 1))))


def half_aperture_schedule(shape=DEFAULT_SHAPE) -> ApertureSchedule:
    """Left/right then top/bottom aperture halves; senses the first-order parallax directly."""
    U, V = shape
    a1 = np.zeros((U, V))
    a1[: U // 2, :] = 1.0
    a3 = np.zeros((U, V))
    a3[:, : V // 2] = 1.0
    return ApertureSchedule(np.stack([a1, 1.0 - a1, a3, 1.0 - a3]), binary=True, complementary=True)
