"""Forward measurement models.

Coded-aperture images are kept in raw units (weighted sums of light-field
samples, so an all-ones 8x8 pattern reaches at most 64). The event model works
on images normalized to [0, 1] by the pattern element count ``U*V``, the
brightest a single pattern can make a pixel; frame noise is specified in the
same normalized units.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .aperture import ApertureSchedule
from .errors import ShapeError, TimingError
from .lfcore import LightField, _as_array

__all__ = [
    "SensorConfig",
    "Measurement",
    "JaecMask",
    "Full4DMask",
    "TimingConfig",
    "EventStream",
    "quantize",
    "coded_image",
    "coded_images",
    "frame_sum",
    "event_stack",
    "simulate_exposure",
    "measure_images",
    "simulate_event_stream",
    "jaec_image",
    "full4d_image",
    "lens_array_baseline",
]


@dataclass(frozen=True)
class SensorConfig:
    tau: float = 0.15
    epsilon: float = 0.01
    sigma_tau: float = 0.021
    sigma_frame: float = 0.005
    rng_seed: int | None = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.sigma_tau < 0 or self.sigma_frame < 0:
            raise ValueError("noise levels must be non-negative")

    def noiseless(self) -> "SensorConfig":
        return replace(self, sigma_tau=0.0, sigma_frame=0.0)

    def with_tau(self, tau: float) -> "SensorConfig":
        return replace(self, tau=float(tau))


def _rng(seed, stream: int) -> np.random.Generator:
    # independent, order-free streams per (seed, purpose index)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


@dataclass
class Measurement:
    """Single-exposure observation: frame, N-1 event stacks and the event count.

    ``frame`` is in raw coded-image units; ``scale`` is the normalization used
    by the event model (``U*V``).
    """

    frame: np.ndarray
    stacks: np.ndarray  # (N-1, X, Y)
    n_event: float
    scale: float
    tau: float

    @property
    def n_patterns(self) -> int:
        return self.stacks.shape[0] + 1

    def save(self, path) -> None:
        np.savez_compressed(path, frame=self.frame, stacks=self.stacks, n_event=self.n_event,
                            scale=self.scale, tau=self.tau)

    @classmethod
    def load(cls, path) -> "Measurement":
        with np.load(path) as z:
            stacks = z["stacks"]
            return cls(frame=z["frame"], stacks=stacks, n_event=z["n_event"].item(),
                       scale=float(z["scale"]), tau=float(z["tau"]))


def quantize(x):
    """sign(x) * floor(|x|)."""
    return np.trunc(x)


def _check_pattern(lf_data, pattern):
    pattern = np.asarray(pattern, dtype=np.float64)
    if pattern.shape != lf_data.shape[2:]:
        raise ShapeError(f"pattern shape {pattern.shape} does not match views {lf_data.shape[2:]}")
    return pattern


def coded_image(lf, pattern) -> np.ndarray:
    data = _as_array(lf)
    pattern = _check_pattern(data, pattern)
    return np.einsum("xyuv,uv->xy", data, pattern)


def coded_images(lf, sched: ApertureSchedule) -> np.ndarray:
    """All N coded-aperture images, shape ``(N, X, Y)``."""
    data = _as_array(lf)
    if sched.pattern_shape != data.shape[2:]:
        raise ShapeError(f"schedule patterns {sched.pattern_shape} vs views {data.shape[2:]}")
    return np.einsum("xyuv,nuv->nxy", data, sched.patterns)


def frame_sum(images, cfg: SensorConfig, rng: np.random.Generator | None = None,
              scale: float = 1.0) -> np.ndarray:
    """Sum of the coded images plus Gaussian read noise, clamped at 0.

    ``scale`` converts the normalized noise level to the units of ``images``.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise ShapeError("frame_sum needs at least two images")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ShapeError("images must share one shape")
    total = np.sum(images, axis=0)
    if cfg.sigma_frame > 0:
        rng = rng if rng is not None else _rng(cfg.rng_seed, 1000)
        total = total + rng.normal(0.0, cfg.sigma_frame * scale, size=shape)
    return np.maximum(total, 0.0)


def _threshold(shape, cfg: SensorConfig, rng) -> np.ndarray | float:
    if cfg.sigma_tau == 0:
        return cfg.tau
    thr = cfg.tau + rng.normal(0.0, cfg.sigma_tau, size=shape)
    floor = cfg.tau / 4
    bad = thr <= floor
    while np.any(bad):
        thr[bad] = cfg.tau + rng.normal(0.0, cfg.sigma_tau, size=int(bad.sum()))
        bad = thr <= floor
    return thr


def event_stack(i_prev, i_next, cfg: SensorConfig, rng: np.random.Generator | None = None,
                quantized: bool = True) -> np.ndarray:
    """Signed event count per pixel for one pattern transition.

    Inputs are normalized images. With ``quantized=False`` the unquantized
    log-ratio is returned (the continuous-event idealization).
    """
    i_prev = np.asarray(i_prev, dtype=np.float64)
    i_next = np.asarray(i_next, dtype=np.float64)
    if i_prev.shape != i_next.shape:
        raise ShapeError(f"shape mismatch {i_prev.shape} vs {i_next.shape}")
    rng = rng if rng is not None else _rng(cfg.rng_seed, 0)
    thr = _threshold(i_prev.shape, cfg, rng)
    x = (np.log(i_next + cfg.epsilon) - np.log(i_prev + cfg.epsilon)) / thr
    if not quantized:
        return x
    return quantize(x).astype(np.int32)


def measure_images(images, cfg: SensorConfig, scale: float, quantized: bool = True) -> Measurement:
    """Frame and event stacks from precomputed raw coded images ``(N, X, Y)``."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n < 2:
        raise ShapeError("need at least two coded images")
    norm = images / scale
    stacks = np.stack([
        event_stack(norm[k], norm[k + 1], cfg, rng=_rng(cfg.rng_seed, k), quantized=quantized)
        for k in range(n - 1)
    ])
    frame = frame_sum(images, cfg, rng=_rng(cfg.rng_seed, 1000), scale=scale)
    n_event = np.abs(stacks).sum()
    n_event = int(n_event) if quantized else float(n_event)
    return Measurement(frame=frame, stacks=stacks, n_event=n_event, scale=float(scale), tau=cfg.tau)


def simulate_exposure(lf, sched: ApertureSchedule, cfg: SensorConfig,
                      quantized: bool = True) -> Measurement:
    data = _as_array(lf)
    images = coded_images(data, sched)
    return measure_images(images, cfg, scale=float(np.prod(data.shape[2:])), quantized=quantized)


# ---------------------------------------------------------------------------
# event streams


@dataclass(frozen=True)
class TimingConfig:
    """Display/exposure timing in milliseconds."""

    t_c: float = 5.434
    display_duration: float = 5.0
    n_patterns: int = 4
    transient: float = 0.5

    @property
    def exposure(self) -> float:
        return self.n_patterns * self.t_c

    @property
    def t_c_us(self) -> int:
        return int(round(self.t_c * 1000))

    @property
    def transient_us(self) -> int:
        return int(round(self.transient * 1000))

    @property
    def exposure_us(self) -> int:
        return self.n_patterns * self.t_c_us

    def check(self) -> None:
        if not (self.transient > 0 and self.t_c > self.transient):
            raise TimingError(f"need t_c > transient > 0 (t_c={self.t_c}, transient={self.transient})")
        if self.transient >= self.display_duration:
            raise TimingError("transient must be shorter than the display duration")
        if self.n_patterns < 2:
            raise TimingError("need at least two patterns per exposure")

    def burst_start_us(self, cycle: int, transition: int) -> int:
        """Onset of the transition from pattern ``transition`` to ``transition+1`` (1-based)."""
        return (cycle * self.n_patterns + transition) * self.t_c_us


@dataclass
class EventStream:
    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    shape: tuple | None = None
    t_end_us: int | None = None  # end of the recording, if known

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int64)
        n = len(self.t_us)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ShapeError("event stream columns differ in length")

    def __len__(self):
        return len(self.t_us)

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t_us, kind="stable")
        return EventStream(self.t_us[order], self.x[order], self.y[order], self.polarity[order], self.shape,
                           self.t_end_us)

    def concat(self, other: "EventStream") -> "EventStream":
        return EventStream(
            np.concatenate([self.t_us, other.t_us]),
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.polarity, other.polarity]),
            self.shape or other.shape,
            None if self.t_end_us is None or other.t_end_us is None else max(self.t_end_us, other.t_end_us),
        ).sorted()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "x", "y", "polarity"])
            w.writerows(zip(self.t_us.tolist(), self.x.tolist(), self.y.tolist(), self.polarity.tolist()))

    @classmethod
    def from_csv(cls, path, shape=None, t_end_us=None) -> "EventStream":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r, None)
            if header is None or [h.strip() for h in header] != ["t_us", "x", "y", "polarity"]:
                raise ValueError(f"{path}: expected header t_us,x,y,polarity")
            rows = [tuple(int(c) for c in row) for row in r if row]
        if rows:
            t, x, y, p = (np.array(c) for c in zip(*rows))
        else:
            t = x = y = p = np.zeros(0, dtype=np.int64)
        if p.size and not np.all(np.abs(p) == 1):
            raise ValueError(f"{path}: polarity must be +1 or -1")
        return cls(t, x, y, p, shape, t_end_us)


def events_from_stack(stack, start_us: int, duration_us: int, rng) -> EventStream:
    """Expand a signed stack into individual events spread uniformly over a window."""
    stack = np.asarray(stack).astype(np.int64)
    counts = np.abs(stack).ravel()
    idx = np.repeat(np.arange(counts.size), counts)
    xs, ys = np.unravel_index(idx, stack.shape)
    pol = np.sign(stack.ravel()[idx])
    perm = rng.permutation(idx.size)
    t = start_us + np.floor(rng.random(idx.size) * duration_us).astype(np.int64)
    return EventStream(t, xs[perm], ys[perm], pol[perm], stack.shape)


def simulate_event_stream(lf, sched: ApertureSchedule, timing: TimingConfig, cfg: SensorConfig,
                          n_cycles: int = 1, measurement: Measurement | None = None) -> EventStream:
    """Timestamped events for ``n_cycles`` exposure cycles.

    Threshold mismatch is treated as fixed per pixel, so every cycle repeats the
    stacks of ``simulate_exposure(lf, sched, cfg)``; only the event timing varies.
    """
    timing.check()
    if timing.n_patterns != sched.n:
        raise TimingError(f"timing has {timing.n_patterns} patterns, schedule has {sched.n}")
    m = measurement if measurement is not None else simulate_exposure(lf, sched, cfg)
    rng = _rng(cfg.rng_seed, 2000)
    parts_t, parts_x, parts_y, parts_p = [], [], [], []
    for c in range(n_cycles):
        for k in range(sched.n - 1):
            ev = events_from_stack(m.stacks[k], timing.burst_start_us(c, k + 1), timing.transient_us, rng)
            parts_t.append(ev.t_us)
            parts_x.append(ev.x)
            parts_y.append(ev.y)
            parts_p.append(ev.polarity)
    shape = m.frame.shape
    end = n_cycles * timing.exposure_us
    if not parts_t:
        return EventStream(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), shape, end)
    return EventStream(np.concatenate(parts_t), np.concatenate(parts_x), np.concatenate(parts_y),
                       np.concatenate(parts_p), shape, end).sorted()


def write_stack(stack, path) -> None:
    """16-bit signed little-endian grid preceded by ``X, Y`` as uint32."""
    stack = np.asarray(stack)
    if stack.ndim != 2:
        raise ShapeError("stack must be 2-D")
    if stack.size and (stack.min() < -32768 or stack.max() > 32767):
        raise OverflowError("stack values exceed int16 range")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *stack.shape))
        fh.write(stack.astype("<i2").tobytes(order="C"))


def read_stack(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    X, Y = struct.unpack("<II", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<i2")
    if body.size != X * Y:
        raise ShapeError(f"{path}: header says {X}x{Y}, body has {body.size} values")
    return body.reshape(X, Y).astype(np.int32)


# ---------------------------------------------------------------------------
# baseline imaging models


@dataclass(frozen=True)
class JaecMask:
    p: np.ndarray  # (N, X, Y) binary

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeError("JAEC mask must have shape (N, X, Y)")
        if not np.all((p == 0) | (p == 1)):
            raise ValueError("JAEC pixel masks must be binary")
        object.__setattr__(self, "p", p)

    @classmethod
    def random(cls, n: int, shape, rng_seed=0) -> "JaecMask":
        rng = np.random.default_rng(rng_seed)
        return cls(rng.integers(0, 2, size=(n,) + tuple(shape)))


@dataclass(frozen=True)
class Full4DMask:
    m: np.ndarray  # (X, Y, U, V) in [0, 1]

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 4 or m.min() < 0 or m.max() > 1:
            raise ValueError("Full-4D mask must be a 4-D array with entries in [0, 1]")
        object.__setattr__(self, "m", m)

    @classmethod
    def random(cls, shape, rng_seed=0) -> "Full4DMask":
        return cls(np.random.default_rng(rng_seed).random(tuple(shape)))


def _add_frame_noise(img, cfg, scale, stream):
    if cfg is None or cfg.sigma_frame == 0:
        return img
    noisy = img + _rng(cfg.rng_seed, stream).normal(0.0, cfg.sigma_frame * scale, size=img.shape)
    return np.maximum(noisy, 0.0)


def jaec_image(lf, sched: ApertureSchedule, mask: JaecMask, cfg: SensorConfig | None = None) -> np.ndarray:
    """Joint aperture-exposure coded image: per-pixel selection of coded images."""
    data = _as_array(lf)
    images = coded_images(data, sched)
    if mask.p.shape[0] != sched.n:
        raise ShapeError(f"mask has {mask.p.shape[0]} frames, schedule has {sched.n}")
    if mask.p.shape[1:] != images.shape[1:]:
        raise ShapeError(f"mask spatial shape {mask.p.shape[1:]} vs {images.shape[1:]}")
    img = np.sum(mask.p * images, axis=0)
    return _add_frame_noise(img, cfg, float(np.prod(data.shape[2:])), 3000)


def full4d_image(lf, mask: Full4DMask, cfg: SensorConfig | None = None) -> np.ndarray:
    data = _as_array(lf)
    if mask.m.shape != data.shape:
        raise ShapeError(f"mask shape {mask.m.shape} vs light field {data.shape}")
    img = np.einsum("xyuv,xyuv->xy", mask.m, data)
    return _add_frame_noise(img, cfg, float(np.prod(data.shape[2:])), 3001)


def _cubic_kernel(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def cubic_upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Interpolation matrix ``(n_in*factor, n_in)``: Keys cubic, pixel-center aligned, edge clamp."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    W = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        j = base + off
        w = _cubic_kernel(src - j)
        np.add.at(W, (np.arange(n_out), np.clip(j, 0, n_in - 1)), w)
    return W


def lens_array_baseline(lf, factor: int = 8) -> LightField:
    """Naive lens-array model: box-downsample every view, then bicubic-upsample back."""
    data = _as_array(lf)
    X, Y, U, V = data.shape
    if X % factor or Y % factor:
        raise ShapeError(f"spatial size {X}x{Y} not divisible by {factor}")
    low = data.reshape(X // factor, factor, Y // factor, factor, U, V).mean(axis=(1, 3))
    Wx = cubic_upsample_matrix(X // factor, factor)
    Wy = cubic_upsample_matrix(Y // factor, factor)
    up = np.einsum("ia,abuv,jb->ijuv", Wx, low, Wy)
    return LightField(np.clip(up, 0.0, 1.0))
