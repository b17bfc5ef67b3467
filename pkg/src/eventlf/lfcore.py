"""Light-field container, directory I/O, synthetic layered scenes and quality metrics.

Array conventions
-----------------
A light field is stored as a float64 array of shape ``(X, Y, U, V)``: ``(x, y)``
is the pixel position and ``(u, v)`` the viewpoint. Images are ``(X, Y)`` arrays
and the first axis maps to PNG rows. Python-side indices are 0-based; view file
names are 1-based (``view_1_1.png`` .. ``view_8_8.png``).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import IoError, MissingView, ShapeError, SpecError

PSNR_CAP_DB = 99.0

__all__ = [
    "LightField",
    "Layer",
    "SceneSpec",
    "QualityReport",
    "load_lightfield",
    "save_lightfield",
    "save_image",
    "synth_scene",
    "psnr",
    "view_psnr",
    "ssim",
    "quality_report",
    "epi_slice",
    "synthetic_suite",
]


@dataclass(frozen=True)
class LightField:
    """Monochrome 4-D light field with intensities in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"light field must be 4-D (x, y, u, v), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("light field contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("light field values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def spatial_shape(self):
        return self.data.shape[:2]

    @property
    def angular_shape(self):
        return self.data.shape[2:]

    def view(self, u: int, v: int) -> np.ndarray:
        return self.data[:, :, u, v]

    @classmethod
    def from_array(cls, arr, clip: bool = True) -> "LightField":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(np.clip(arr, 0.0, 1.0) if clip else arr)


def _as_array(x) -> np.ndarray:
    if isinstance(x, LightField):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# directory I/O


def _view_name(u: int, v: int) -> str:
    return f"view_{u}_{v}.png"


def load_lightfield(directory, n_u: int = 8, n_v: int = 8) -> LightField:
    """Read ``view_{u}_{v}.png`` grayscale files (1-based u, v) into a LightField."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoError(f"not a directory: {directory}")
    views = {}
    shape = None
    for u in range(1, n_u + 1):
        for v in range(1, n_v + 1):
            path = directory / _view_name(u, v)
            if not path.exists():
                raise MissingView(u, v, path)
            try:
                with PILImage.open(path) as im:
                    if im.mode not in ("L", "I;16", "I", "F"):
                        im = im.convert("L")
                    arr = np.asarray(im)
            except (OSError, ValueError) as exc:
                raise IoError(f"cannot read {path}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ShapeError(f"{path.name} has shape {arr.shape}, expected {shape}")
            views[u, v] = arr
    sample = views[1, 1]
    if sample.dtype == np.uint8:
        full = 255.0
    elif sample.dtype == np.uint16 or sample.dtype == np.int32:
        full = 65535.0
    else:
        full = 1.0
    data = np.empty(shape + (n_u, n_v), dtype=np.float64)
    for (u, v), arr in views.items():
        data[:, :, u - 1, v - 1] = arr / full
    return LightField(np.clip(data, 0.0, 1.0))


def save_image(img, path) -> None:
    """Write an ``(X, Y)`` array with values in ``[0, 1]`` as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def save_lightfield(lf: LightField, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = _as_array(lf)
    for u in range(data.shape[2]):
        for v in range(data.shape[3]):
            save_image(data[:, :, u, v], directory / _view_name(u + 1, v + 1))


# ---------------------------------------------------------------------------
# synthetic layered scenes


@dataclass
class Layer:
    """One fronto-parallel layer of a synthetic scene.

    ``texture`` may be an array, a path to a grayscale image, or ``None`` for a
    procedural texture drawn from ``seed``. ``opacity`` is an array in [0, 1],
    ``None`` (fully opaque), or one of the procedural masks ``"disk"``,
    ``"blobs"``. ``disparity`` is in pixels per viewpoint step.
    """

    disparity: float
    seed: int = 0
    texture: object = None
    opacity: object = None
    smoothness: float = 1.5


@dataclass
class SceneSpec:
    """Layers listed back to front."""

    layers: list = field(default_factory=list)
    name: str = "scene"


def procedural_texture(X: int, Y: int, seed: int, smoothness: float = 1.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((X, Y))
    tex = ndimage.gaussian_filter(noise, smoothness, mode="wrap") if smoothness > 0 else noise
    lo, hi = tex.min(), tex.max()
    if hi - lo < 1e-12:
        return np.full((X, Y), 0.5)
    # keep away from 0 so log-domain event models stay well conditioned
    return 0.05 + 0.9 * (tex - lo) / (hi - lo)


def _procedural_mask(kind: str, X: int, Y: int, seed: int) -> np.ndarray:
    if kind == "disk":
        xx, yy = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
        r = 0.3 * min(X, Y)
        return ((xx - (X - 1) / 2) ** 2 + (yy - (Y - 1) / 2) ** 2 <= r * r).astype(np.float64)
    if kind == "blobs":
        rng = np.random.default_rng(seed + 7919)
        field_ = ndimage.gaussian_filter(rng.standard_normal((X, Y)), max(X, Y) / 8, mode="wrap")
        return (field_ > np.median(field_)).astype(np.float64)
    raise SpecError(f"unknown procedural mask {kind!r}")


def _layer_arrays(layer: Layer, X: int, Y: int):
    tex = layer.texture
    if tex is None:
        tex = procedural_texture(X, Y, layer.seed, layer.smoothness)
    elif isinstance(tex, (str, os.PathLike)):
        try:
            with PILImage.open(tex) as im:
                tex = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise IoError(f"cannot read texture {tex}: {exc}") from exc
    tex = np.asarray(tex, dtype=np.float64)
    if tex.shape != (X, Y):
        raise SpecError(f"texture shape {tex.shape} does not match scene size {(X, Y)}")

    alpha = layer.opacity
    if alpha is None:
        alpha = np.ones((X, Y))
    elif isinstance(alpha, str):
        alpha = _procedural_mask(alpha, X, Y, layer.seed)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (X, Y):
        raise SpecError(f"opacity shape {alpha.shape} does not match scene size {(X, Y)}")
    return np.clip(tex, 0, 1), np.clip(alpha, 0, 1)


def synth_scene(spec: SceneSpec, X: int, Y: int, n_u: int = 8, n_v: int = 8) -> LightField:
    """Render a layered scene into a light field.

    View ``(u, v)`` shows each layer translated by ``d * (u - u0, v - v0)`` with
    the center viewpoint ``u0 = (n_u - 1) / 2`` (4.5 in 1-based terms for 8
    views). Layers are composited back to front; sampling is bilinear with
    edge clamping.
    """
    if not spec.layers:
        raise SpecError("scene has no layers")
    if X < 16 or Y < 16:
        raise SpecError(f"scene must be at least 16x16, got {X}x{Y}")
    for layer in spec.layers:
        if not np.isfinite(layer.disparity):
            raise SpecError("layer disparity must be finite")

    arrays = [_layer_arrays(layer, X, Y) for layer in spec.layers]
    u0, v0 = (n_u - 1) / 2.0, (n_v - 1) / 2.0
    xx, yy = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), indexing="ij")
    out = np.zeros((X, Y, n_u, n_v))
    for u in range(n_u):
        for v in range(n_v):
            view = np.zeros((X, Y))
            for layer, (tex, alpha) in zip(spec.layers, arrays):
                coords = [xx - layer.disparity * (u - u0), yy - layer.disparity * (v - v0)]
                t = ndimage.map_coordinates(tex, coords, order=1, mode="nearest")
                a = ndimage.map_coordinates(alpha, coords, order=1, mode="nearest")
                view = view * (1.0 - a) + t * a
            out[:, :, u, v] = view
    return LightField(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b) -> float:
    """PSNR in dB for data on [0, 1], from the global MSE; identical inputs give 99."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def view_psnr(reference, estimate) -> float:
    """Mean over views of the per-view PSNR of two light fields."""
    ref, est = _as_array(reference), _as_array(estimate)
    if ref.shape != est.shape:
        raise ShapeError(f"psnr shape mismatch {ref.shape} vs {est.shape}")
    mse = np.mean((ref - est) ** 2, axis=(0, 1))
    with np.errstate(divide="ignore"):
        db = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP_DB)
    return float(np.mean(np.minimum(db, PSNR_CAP_DB)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, for images on [0, 1].

    Local statistics use population (biased) moments; the window is applied
    with reflective padding and the mean is taken over the region at least
    half a window away from the border when the image is large enough.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError("ssim expects 2-D images")
    c1, c2 = k1**2, k2**2
    w = _gaussian_window(win_size, sigma)

    def filt(z):
        return ndimage.correlate(z, w, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    pad = (win_size - 1) // 2
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


@dataclass
class QualityReport:
    psnr: float  # mean of per-view PSNR
    psnr_global: float
    ssim: float  # mean of per-view SSIM
    per_view: list

    def to_record(self, scene: str) -> dict:
        return {
            "scene": scene,
            "psnr_db": round(self.psnr, 6),
            "psnr_global_db": round(self.psnr_global, 6),
            "ssim": round(self.ssim, 6),
            "per_view": [[round(p, 4) for p in row] for row in self.per_view],
        }

    def to_json(self, scene: str) -> str:
        return json.dumps(self.to_record(scene))


def quality_report(reference, estimate) -> QualityReport:
    ref, est = _as_array(reference), _as_array(estimate)
    if ref.shape != est.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {est.shape}")
    n_u, n_v = ref.shape[2:]
    per_view = [[psnr(ref[:, :, u, v], est[:, :, u, v]) for v in range(n_v)] for u in range(n_u)]
    ssims = [ssim(ref[:, :, u, v], np.clip(est[:, :, u, v], 0, 1)) for u in range(n_u) for v in range(n_v)]
    return QualityReport(
        psnr=float(np.mean(per_view)),
        psnr_global=psnr(ref, est),
        ssim=float(np.mean(ssims)),
        per_view=per_view,
    )


def epi_slice(lf, y: int, v: int) -> np.ndarray:
    """Epipolar plane image at pixel row ``y`` and viewpoint row ``v``, indexed ``(x, u)``."""
    data = _as_array(lf)
    X, Y, U, V = data.shape
    if not (0 <= y < Y):
        raise IndexError(f"y={y} out of range [0, {Y})")
    if not (0 <= v < V):
        raise IndexError(f"v={v} out of range [0, {V})")
    return data[:, y, :, v].copy()


def synthetic_suite(n: int, size: int = 32, seed: int = 0, max_disparity: float = 3.0) -> list:
    """``n`` two-layer scenes with disparities drawn from [-max_disparity, max_disparity]."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        d_back, d_front = np.sort(rng.uniform(-max_disparity, max_disparity, size=2))
        seeds = rng.integers(0, 2**31, size=2)
        spec = SceneSpec(
            [Layer(float(d_back), seed=int(seeds[0]), smoothness=float(rng.uniform(1.0, 3.0))),
             Layer(float(d_front), seed=int(seeds[1]), opacity="blobs" if i % 2 else "disk",
                   smoothness=float(rng.uniform(1.0, 3.0)))],
            name=f"synthetic_{i:02d}",
        )
        scenes.append(synth_scene(spec, size, size))
    return scenes
