"""Linear light-field reconstruction from coded-aperture observations.

Every pixel sees ``K`` weighted sums of its ``U*V`` views (``y = A l``). The
regularized problem solved here is::

    sum_pixels ||A l - y||^2 + lt ||L||^2 + lv ||D_uv L||^2 + ls ||D_xy L||^2

with first differences that are zero at the last sample of each axis. The
``*_solve`` functions return raw arrays; the ``*_recon`` functions wrap the
result in a clipped :class:`~eventlf.lfcore.LightField`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .aperture import ApertureSchedule
from .equivalence import recover_images
from .errors import ShapeError, SingularError, SizeError
from .lfcore import LightField
from .sensor import Measurement

DENSE_CAP = 16_384  # 16x16x8x8 unknowns
_DENSE_FACTOR_LIMIT = 8_192


@dataclass(frozen=True)
class ReconConfig:
    lambda_tikhonov: float = 1e-4
    lambda_view_smooth: float = 1e-2
    lambda_spatial_smooth: float = 1e-3
    cg_max_iter: int = 500
    cg_tol: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_tikhonov, self.lambda_view_smooth, self.lambda_spatial_smooth) < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.cg_tol <= 0 or self.cg_max_iter < 1:
            raise ValueError("cg_tol must be positive and cg_max_iter >= 1")


@dataclass(frozen=True)
class SensingModel:
    rows: np.ndarray  # (K, U*V)
    angular_shape: tuple

    @classmethod
    def from_schedule(cls, sched: ApertureSchedule) -> "SensingModel":
        return cls(sched.sensing_matrix(), tuple(sched.pattern_shape))

    @classmethod
    def image_only(cls, sched: ApertureSchedule) -> "SensingModel":
        return cls(sched.sensing_matrix().sum(axis=0, keepdims=True), tuple(sched.pattern_shape))


@dataclass
class CGResult:
    x: np.ndarray  # (X, Y, U, V), unclipped
    iterations: int
    residual: float  # relative residual ||b - Hx|| / ||b||
    converged: bool
    objective_trace: list = field(default_factory=list)

    @property
    def lightfield(self) -> LightField:
        return LightField.from_array(self.x)


def _as_stack(images) -> np.ndarray:
    y = np.asarray(images, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ShapeError(f"images must be (K, X, Y), got {y.shape}")
    return y


def _forward(rows, l):
    # rows: (K, P) shared or (X, Y, K, P) per pixel; l: (X, Y, P)
    if rows.ndim == 2:
        return np.einsum("kp,xyp->kxy", rows, l)
    return np.einsum("xykp,xyp->kxy", rows, l)


def _adjoint(rows, y):
    if rows.ndim == 2:
        return np.einsum("kp,kxy->xyp", rows, y)
    return np.einsum("xykp,kxy->xyp", rows, y)


def _dtd(z, axis):
    """D^T D along ``axis`` for forward differences with a zero last difference."""
    d = np.diff(z, axis=axis)
    out = np.zeros_like(z)
    lead = [slice(None)] * z.ndim
    tail = [slice(None)] * z.ndim
    lead[axis] = slice(None, -1)
    tail[axis] = slice(1, None)
    out[tuple(lead)] -= d
    out[tuple(tail)] += d
    return out


def _sq_diff(z, axis):
    return float(np.sum(np.diff(z, axis=axis) ** 2))


class _NormalOperator:
    def __init__(self, rows, shape, cfg: ReconConfig):
        self.rows = rows
        self.shape = shape  # (X, Y, U, V)
        self.cfg = cfg
        if rows.ndim == 2:
            self.gram = rows.T @ rows
        else:
            self.gram = None

    def data_normal(self, l4):
        X, Y, U, V = self.shape
        flat = l4.reshape(X, Y, U * V)
        if self.gram is not None:
            out = flat @ self.gram
        else:
            out = _adjoint(self.rows, _forward(self.rows, flat))
        return out.reshape(self.shape)

    def __call__(self, l4):
        c = self.cfg
        out = self.data_normal(l4)
        if c.lambda_tikhonov:
            out = out + c.lambda_tikhonov * l4
        if c.lambda_view_smooth:
            out = out + c.lambda_view_smooth * (_dtd(l4, 2) + _dtd(l4, 3))
        if c.lambda_spatial_smooth:
            out = out + c.lambda_spatial_smooth * (_dtd(l4, 0) + _dtd(l4, 1))
        return out


def objective_value(rows, images, x, cfg: ReconConfig) -> float:
    """Regularized least-squares objective of a candidate light field ``x``."""
    X, Y, U, V = x.shape
    y = _as_stack(images)
    r = _forward(rows, x.reshape(X, Y, U * V)) - y
    val = float(np.sum(r**2)) + cfg.lambda_tikhonov * float(np.sum(x**2))
    val += cfg.lambda_view_smooth * (_sq_diff(x, 2) + _sq_diff(x, 3))
    val += cfg.lambda_spatial_smooth * (_sq_diff(x, 0) + _sq_diff(x, 1))
    return val


def cg_solve(rows, images, angular_shape, cfg: ReconConfig) -> CGResult:
    """Conjugate gradient on the normal equations, matrix-free.

    ``rows`` is ``(K, U*V)`` for a pattern shared by all pixels or
    ``(X, Y, K, U*V)`` for per-pixel sensing. Stops when the relative residual
    drops below ``cfg.cg_tol`` or after ``cfg.cg_max_iter`` iterations.
    """
    y = _as_stack(images)
    rows = np.asarray(rows, dtype=np.float64)
    K, X, Y = y.shape
    U, V = angular_shape
    if rows.shape[-2:] != (K, U * V):
        raise ShapeError(f"sensing rows {rows.shape} do not match {K} observations of {U}x{V} views")
    shape = (X, Y, U, V)
    H = _NormalOperator(rows, shape, cfg)
    b = _adjoint(rows, y).reshape(shape)
    yy = float(np.sum(y * y))
    bnorm = float(np.sqrt(np.sum(b * b)))
    x = np.zeros(shape)
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0, True, [yy])

    r = b.copy()
    p = r.copy()
    rho = float(np.sum(r * r))
    trace = [yy]
    it = 0
    rel = np.sqrt(rho) / bnorm
    while it < cfg.cg_max_iter and rel >= cfg.cg_tol:
        Hp = H(p)
        alpha = rho / float(np.sum(p * Hp))
        x += alpha * p
        r -= alpha * Hp
        rho_new = float(np.sum(r * r))
        p = r + (rho_new / rho) * p
        rho = rho_new
        it += 1
        rel = np.sqrt(rho) / bnorm
        # f(x) = y'y - b'x - x'r for the quadratic with gradient -2r
        trace.append(yy - float(np.sum(b * x)) - float(np.sum(x * r)))
    return CGResult(x, it, float(rel), bool(rel < cfg.cg_tol), trace)


def _check_images(images, sched: ApertureSchedule):
    y = _as_stack(images)
    if y.shape[0] != sched.n:
        raise ShapeError(f"{y.shape[0]} images for a schedule of {sched.n} patterns")
    return y


def cg_recon(images, sched: ApertureSchedule, cfg: ReconConfig = ReconConfig()) -> CGResult:
    y = _check_images(images, sched)
    return cg_solve(sched.sensing_matrix(), y, sched.pattern_shape, cfg)


def least_norm_solve(images, sched: ApertureSchedule, lambda_tikhonov: float = 0.0) -> np.ndarray:
    """Per-pixel ``A^T (A A^T + lambda I)^{-1} y``.

    At ``lambda = 0`` the limit of that expression, the pseudo-inverse, is used.
    Complementary pairs always sum to the all-ones row, so such schedules lose
    ``N/2 - 1`` ranks by construction; any further deficiency (duplicate or
    dependent patterns) raises :class:`SingularError`.
    """
    y = _check_images(images, sched)
    A = sched.sensing_matrix()
    K = A.shape[0]
    X, Y = y.shape[1:]
    flat = y.reshape(K, -1)
    if lambda_tikhonov > 0.0:
        coef = np.linalg.solve(A @ A.T + lambda_tikhonov * np.eye(K), flat)
        sol = A.T @ coef
    else:
        expected = K - (K // 2 - 1 if sched.complementary else 0)
        rank = np.linalg.matrix_rank(A)
        if rank < expected:
            raise SingularError(f"sensing matrix has rank {rank}, expected {expected} "
                                "(repeated or dependent patterns); use lambda > 0")
        sol = np.linalg.pinv(A) @ flat
    return sol.T.reshape((X, Y) + tuple(sched.pattern_shape))


def least_norm_recon(images, sched: ApertureSchedule, lambda_tikhonov: float = 0.0) -> LightField:
    return LightField.from_array(least_norm_solve(images, sched, lambda_tikhonov))


def image_only_recon(frame, sched: ApertureSchedule, cfg: ReconConfig = ReconConfig()) -> LightField:
    """Reconstruction from the frame alone, seen through the summed pattern."""
    model = SensingModel.image_only(sched)
    return cg_solve(model.rows, _as_stack(frame), model.angular_shape, cfg).lightfield


def recovered_coded_images(m: Measurement, tau: float | None = None, epsilon: float = 0.01) -> np.ndarray:
    """Coded images in raw units recovered from a measurement."""
    tau = m.tau if tau is None else tau
    rec = recover_images(m.frame / m.scale, m.stacks, tau, epsilon=epsilon)
    return rec.images * m.scale


def recon_from_measurement(m: Measurement, sched: ApertureSchedule, tau: float | None = None,
                           cfg: ReconConfig = ReconConfig(), epsilon: float = 0.01) -> LightField:
    """Single exposure to light field: analytic image recovery, then CG.

    A measurement without any events carries no parallax information and is
    handled as the frame-only problem.
    """
    if m.stacks.shape[0] != sched.n - 1:
        raise ShapeError(f"{m.stacks.shape[0]} stacks for a schedule of {sched.n} patterns")
    if not np.any(m.stacks):
        return image_only_recon(m.frame, sched, cfg)
    images = recovered_coded_images(m, tau, epsilon)
    return cg_recon(images, sched, cfg).lightfield


# ---------------------------------------------------------------------------
# dense oracle


def _first_diff_matrix(n: int) -> sp.csr_matrix:
    # rows 0..n-2: z[i+1] - z[i]; last row zero
    D = sp.lil_matrix((n, n))
    for i in range(n - 1):
        D[i, i] = -1.0
        D[i, i + 1] = 1.0
    return D.tocsr()


def assemble_normal_matrix(rows, shape, cfg: ReconConfig) -> sp.csr_matrix:
    """Explicit normal matrix with unknowns ordered (x, y, u, v) row-major."""
    X, Y, U, V = shape
    I = lambda n: sp.identity(n, format="csr")  # noqa: E731
    gram = sp.csr_matrix(rows.T @ rows)
    H = sp.kron(I(X * Y), gram)
    H = H + cfg.lambda_tikhonov * I(X * Y * U * V)
    terms = []
    if cfg.lambda_view_smooth:
        Du = sp.kron(I(X * Y), sp.kron(_first_diff_matrix(U), I(V)))
        Dv = sp.kron(I(X * Y * U), _first_diff_matrix(V))
        terms.append(cfg.lambda_view_smooth * (Du.T @ Du + Dv.T @ Dv))
    if cfg.lambda_spatial_smooth:
        Dx = sp.kron(_first_diff_matrix(X), I(Y * U * V))
        Dy = sp.kron(I(X), sp.kron(_first_diff_matrix(Y), I(U * V)))
        terms.append(cfg.lambda_spatial_smooth * (Dx.T @ Dx + Dy.T @ Dy))
    for t in terms:
        H = H + t
    return sp.csr_matrix(H)


def oracle_dense_solve(images, sched: ApertureSchedule, cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """Direct factorization of the assembled normal equations (acceptance oracle).

    Unknown counts up to 8192 use a dense Cholesky factorization; larger
    instances (up to the 16x16x8x8 cap) use a sparse LU of the same matrix.
    """
    y = _check_images(images, sched)
    K, X, Y = y.shape
    U, V = sched.pattern_shape
    n = X * Y * U * V
    if n > DENSE_CAP:
        raise SizeError(f"{n} unknowns exceeds the oracle cap of {DENSE_CAP}")
    A = sched.sensing_matrix()
    H = assemble_normal_matrix(A, (X, Y, U, V), cfg)
    # right-hand side built pixel by pixel, independent of the einsum path
    b = np.empty(n)
    P = U * V
    for ix in range(X):
        for iy in range(Y):
            k = (ix * Y + iy) * P
            b[k:k + P] = A.T @ y[:, ix, iy]
    if n <= _DENSE_FACTOR_LIMIT:
        Hd = H.toarray()
        try:
            sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Hd), b)
        except np.linalg.LinAlgError:
            sol = scipy.linalg.lstsq(Hd, b)[0]
    else:
        sol = spla.splu(sp.csc_matrix(H)).solve(b)
    return sol.reshape(X, Y, U, V)


def oracle_dense_recon(images, sched: ApertureSchedule, cfg: ReconConfig = ReconConfig()) -> LightField:
    return LightField.from_array(oracle_dense_solve(images, sched, cfg))
