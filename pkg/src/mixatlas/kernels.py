"""Kernel-spline parameterisation of templates and deformation fields.

Templates are ``I_alpha(v) = sum_j K_p(v, v_pj) alpha_j`` and deformations are
``z_beta(v) = sum_j K_g(v, v_gj) beta_j`` with ``beta_j`` a 2D vector.  A
deformation coefficient vector of length ``2 k_g`` always stores every
x-component first, then every y-component.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, InversionFailure

GRAM_RIDGE = 1e-8


@dataclass(frozen=True)
class Box:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate box {self}")

    @classmethod
    def square(cls, half_width: float) -> "Box":
        return cls(-half_width, half_width, -half_width, half_width)

    def contains(self, points: np.ndarray) -> bool:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return bool(np.all((p[:, 0] >= self.xmin) & (p[:, 0] <= self.xmax)
                           & (p[:, 1] >= self.ymin) & (p[:, 1] <= self.ymax)))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)


def _cell_centres(n: int, lo: float, hi: float) -> np.ndarray:
    step = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * step


@dataclass(frozen=True, eq=False)
class LandmarkGrid:
    """Fixed kernel centres inside a bounding box."""

    points: np.ndarray
    box: Box
    # (xs, ys) when points form the tensor grid xs x ys with x varying fastest
    axes: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 2))
        if pts.shape[0] == 0:
            raise ValueError("landmark grid must be nonempty")
        if not self.box.contains(pts):
            raise ValueError("landmarks must lie inside their bounding box")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @classmethod
    def uniform(cls, nx: int, ny: int, box: Box) -> "LandmarkGrid":
        """Rectangular grid of ``nx * ny`` cell centres covering ``box``."""
        if nx < 1 or ny < 1:
            raise ValueError("landmark counts must be positive")
        xs = _cell_centres(nx, box.xmin, box.xmax)
        ys = _cell_centres(ny, box.ymin, box.ymax)
        gx, gy = np.meshgrid(xs, ys)
        return cls(np.column_stack([gx.ravel(), gy.ravel()]), box, axes=(xs, ys))


@dataclass(frozen=True)
class PixelGrid:
    """Row-major pixel lattice whose centres fill ``box``."""

    width: int
    height: int
    box: Box = field(default_factory=lambda: Box.square(1.5))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("pixel grid dimensions must be positive")

    @property
    def size(self) -> int:
        return self.width * self.height

    @cached_property
    def coordinates(self) -> np.ndarray:
        xs = _cell_centres(self.width, self.box.xmin, self.box.xmax)
        ys = _cell_centres(self.height, self.box.ymin, self.box.ymax)
        gx, gy = np.meshgrid(xs, ys)
        out = np.column_stack([gx.ravel(), gy.ravel()])
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class KernelConfig:
    sigma_p: float = 0.2
    sigma_g: float = 0.12
    photometric_box: Box = field(default_factory=lambda: Box.square(1.5))
    geometric_box: Box = field(default_factory=lambda: Box.square(1.0))

    def __post_init__(self):
        if not (self.sigma_p > 0 and self.sigma_g > 0):
            raise ValueError("kernel bandwidths must be positive")


def gaussian_kernel(x, y, sigma: float) -> float:
    """``exp(-|x - y|^2 / (2 sigma^2))``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def cross_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    """Kernel matrix between point sets ``a`` (m, 2) and ``b`` (k, 2)."""
    d = a[..., :, None, :] - b[None, :, :]
    return np.exp(-(d * d).sum(-1) / (2.0 * sigma * sigma))


def build_gram(grid: LandmarkGrid, sigma: float) -> np.ndarray:
    g = cross_kernel(grid.points, grid.points, sigma)
    # exact symmetry regardless of rounding in the subtraction
    return 0.5 * (g + g.T)


def regularized_inverse(gram: np.ndarray, ridge: float = GRAM_RIDGE) -> np.ndarray:
    """Inverse of ``gram + ridge * I`` via Cholesky."""
    m = gram + ridge * np.eye(gram.shape[0])
    try:
        c = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise InversionFailure("regularised Gram matrix is not positive definite") from exc
    ci = np.linalg.solve(c, np.eye(m.shape[0]))
    inv = ci.T @ ci
    if not np.all(np.isfinite(inv)):
        raise InversionFailure("regularised Gram matrix is numerically singular")
    return 0.5 * (inv + inv.T)


def split_beta(beta: np.ndarray, k_g: int) -> tuple[np.ndarray, np.ndarray]:
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] != 2 * k_g:
        raise DimensionMismatch(f"beta has length {beta.shape[-1]}, expected {2 * k_g}")
    return beta[..., :k_g], beta[..., k_g:]


def deformation_field(beta, g_landmarks: LandmarkGrid, sigma_g: float, points) -> np.ndarray:
    """Displacements ``z_beta(v)`` at each query point, shape (m, 2)."""
    bx, by = split_beta(beta, g_landmarks.count)
    k = cross_kernel(np.asarray(points, dtype=float).reshape(-1, 2), g_landmarks.points, sigma_g)
    return np.column_stack([k @ bx, k @ by])


class Geometry:
    """Everything needed to turn (alpha, beta) into a deformed template image.

    Caches the pixel/landmark kernel matrices; instances are read-only and
    safe to share between threads.
    """

    def __init__(self, pixels: PixelGrid, p_landmarks: LandmarkGrid,
                 g_landmarks: LandmarkGrid, config: KernelConfig):
        self.pixels = pixels
        self.p_landmarks = p_landmarks
        self.g_landmarks = g_landmarks
        self.config = config
        self.coords = pixels.coordinates
        self.p_points = p_landmarks.points
        # K_g(v_u, v_gj), shape (|Lambda|, k_g)
        self.kg_pix = cross_kernel(self.coords, g_landmarks.points, config.sigma_g)
        self.design0 = cross_kernel(self.coords, self.p_points, config.sigma_p)
        self.p_axes = p_landmarks.axes

    @classmethod
    def regular(cls, width: int, height: int, p_shape: tuple[int, int],
                g_shape: tuple[int, int], config: KernelConfig | None = None) -> "Geometry":
        config = config or KernelConfig()
        pixels = PixelGrid(width, height, config.photometric_box)
        return cls(pixels,
                   LandmarkGrid.uniform(*p_shape, config.photometric_box),
                   LandmarkGrid.uniform(*g_shape, config.geometric_box),
                   config)

    @property
    def n_pixels(self) -> int:
        return self.coords.shape[0]

    @property
    def k_p(self) -> int:
        return self.p_points.shape[0]

    @property
    def k_g(self) -> int:
        return self.kg_pix.shape[1]

    def displacement(self, beta: np.ndarray) -> np.ndarray:
        """``z_beta(v_u)`` for every pixel; accepts a leading batch axis."""
        bx, by = split_beta(beta, self.k_g)
        zx = (self.kg_pix * bx[..., None, :]).sum(-1)
        zy = (self.kg_pix * by[..., None, :]).sum(-1)
        return np.stack([zx, zy], axis=-1)

    def design_from_displacement(self, z: np.ndarray) -> np.ndarray:
        """``K_p(v_u - z_u, v_pj)`` for displacement arrays of shape (..., |Lambda|, 2)."""
        moved = self.coords - z
        d = moved[..., :, None, :] - self.p_points
        sigma = self.config.sigma_p
        return np.exp(-(d * d).sum(-1) / (2.0 * sigma * sigma))

    def design(self, beta: np.ndarray) -> np.ndarray:
        return self.design_from_displacement(self.displacement(beta))

    def render(self, alpha: np.ndarray, beta: np.ndarray | None = None) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1] != self.k_p:
            raise DimensionMismatch(f"alpha has length {alpha.shape[-1]}, expected {self.k_p}")
        k = self.design0 if beta is None else self.design(beta)
        return (k * alpha[..., None, :]).sum(-1)


def deformed_design_matrix(beta, geometry: Geometry) -> np.ndarray:
    """The (|Lambda|, k_p) matrix ``K_p^beta`` with entries ``K_p(v_u - z_beta(v_u), v_pj)``."""
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1:
        raise DimensionMismatch("beta must be a single coefficient vector")
    return geometry.design(beta)
