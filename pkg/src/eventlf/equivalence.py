"""Analytic recovery of the N coded-aperture images from one frame and N-1 event stacks.

If every stack equals the continuous log-ratio of consecutive images divided by
the contrast threshold, the images follow from the frame in closed form::

    I1 = F / (1 + sum_{n>=2} exp(tau * S_n)),   I_n = I1 * exp(tau * S_n)

where ``S_n`` is the cumulative stack sum up to transition ``n``. The result
always sums back to the frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

EXPONENT_CLAMP = 50.0


@dataclass
class RecoveredImages:
    images: np.ndarray  # (N, X, Y)
    residual_diag: np.ndarray  # (N,) max relative deviation introduced by clamping/offset handling

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return self.images[i]


def continuous_events(i_prev, i_next, tau: float, epsilon: float = 0.0) -> np.ndarray:
    """Unquantized event stack ``(log(I_next + eps) - log(I_prev + eps)) / tau``."""
    a = np.asarray(i_prev, dtype=np.float64) + epsilon
    b = np.asarray(i_next, dtype=np.float64) + epsilon
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("intensities must be positive (after the epsilon offset)")
    return (np.log(b) - np.log(a)) / tau


def recover_images(frame, stacks, tau: float, epsilon: float = 0.0) -> RecoveredImages:
    """Invert the frame/event-stack measurement into N coded-aperture images.

    Parameters
    ----------
    frame : array (X, Y)
        Sum of the N coded images, in the units the events were computed in.
    stacks : sequence of N-1 arrays (X, Y)
        Event stacks, quantized or continuous.
    tau : float
        Contrast threshold.
    epsilon : float
        Log offset used by the event model. Recovery runs on ``I + epsilon``
        (the frame gains ``N * epsilon``) and the offset is removed at the end,
        clamping at zero.
    """
    frame = np.asarray(frame, dtype=np.float64)
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim == frame.ndim:
        stacks = stacks[None]
    if stacks.shape[1:] != frame.shape:
        raise ShapeError(f"stacks {stacks.shape[1:]} do not match frame {frame.shape}")
    n = stacks.shape[0] + 1
    if n < 2:
        raise ShapeError("need at least one event stack")
    if np.any(frame < 0):
        raise DomainError("frame must be non-negative")
    if not np.all(np.isfinite(stacks)):
        raise OverflowError("event stacks contain non-finite values")

    # log-space partial sums; n = 1 has exponent 0
    expo = np.concatenate([np.zeros((1,) + frame.shape), tau * np.cumsum(stacks, axis=0)])
    clamped = np.clip(expo, -EXPONENT_CLAMP, EXPONENT_CLAMP)
    clipped = np.any(clamped != expo, axis=tuple(range(1, expo.ndim)))

    offset_frame = frame + n * epsilon
    weights = np.exp(clamped)
    first = offset_frame / weights.sum(axis=0)
    offset_images = first[None] * weights
    images = np.maximum(offset_images - epsilon, 0.0)

    # rough per-image diagnostics: mass lost to clamping at zero, flagged clamps as inf
    lost = np.abs(images - (offset_images - epsilon))
    denom = np.maximum(np.abs(offset_images - epsilon), np.finfo(float).tiny)
    diag = (lost / denom).reshape(n, -1).max(axis=1)
    diag = np.where(clipped, np.inf, diag)
    return RecoveredImages(images=images, residual_diag=diag)


def quantization_error_bound(n: int, tau: float) -> float:
    """Worst-case multiplicative error of quantized-stack recovery: ``exp((N-1) tau)``.

    Truncation changes each stack by less than one event, so any difference of
    two cumulative sums is off by less than ``N-1`` events. The recovered image
    is its true value times ``exp(-tau*D_n)`` over a weighted mean of
    ``exp(-tau*D_m)``, which keeps the ratio within this factor (on the
    epsilon-offset intensities the events observe).
    """
    if n < 2 or tau <= 0:
        raise ValueError("need N >= 2 and tau > 0")
    return float(np.exp((n - 1) * tau))
