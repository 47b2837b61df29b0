"""Smoothed total variation and differentiable mean-SSIM, with analytic gradients.

TV acts on a piecewise-linear nodal field over the mesh:

    loss = sum over elements i of w_i * sqrt((Dx s)_i^2 + (Dy s)_i^2 + beta)

with per-element constant gradients and weights w_i = element area (default)
or 1. SSIM uses dense stride-1 uniform windows fully inside the images
(population moments); mSSIM is their mean, and the SSIM loss is
1 - mSSIM(x, y) with the guidance image y treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import AssemblyError, DimensionMismatchError
from .fem import _p1_geometry
from .mesh import GridImage, Mesh


@dataclass
class TvConfig:
    beta: float = 1e-8
    weighting: str = "element-area"  # or "uniform"

    def __post_init__(self):
        if self.beta <= 0:
            raise AssemblyError(f"TV smoothing beta must be positive, got {self.beta}")
        if self.weighting not in ("element-area", "uniform"):
            raise AssemblyError(f"unknown TV weighting {self.weighting!r}")


def tv_loss_grad(mesh: Mesh, sigma: np.ndarray, cfg: TvConfig) -> tuple[float, np.ndarray]:
    """Smoothed TV of a nodal field and its exact gradient."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_nodes,):
        raise DimensionMismatchError(
            f"field has {sigma.size} values for a mesh with {mesh.n_nodes} nodes"
        )
    areas, basis = _p1_geometry(mesh)  # raises AssemblyError on degenerate elements
    w = areas if cfg.weighting == "element-area" else np.ones_like(areas)

    g = np.einsum("mi,mie->me", sigma[mesh.elements], basis)  # (m, 2)
    root = np.sqrt(g[:, 0] ** 2 + g[:, 1] ** 2 + cfg.beta)
    loss = float(np.sum(w * root))

    coeff = w / root
    contrib = np.einsum("m,mie,me->mi", coeff, basis, g)  # (m, 3)
    grad = np.zeros(mesh.n_nodes)
    np.add.at(grad, mesh.elements.ravel(), contrib.ravel())
    return loss, grad


def tv_diffusion_matrix(mesh: Mesh, sigma: np.ndarray, cfg: TvConfig):
    """Lagged-diffusivity approximation of the TV Hessian (sparse, PSD).

    H = sum_i (w_i / sqrt(|D s|_i^2 + beta)) * (bx_i bx_i^T + by_i by_i^T),
    so that grad TV = H(sigma) @ sigma at the frozen weights.
    """
    import scipy.sparse as sp

    sigma = np.asarray(sigma, dtype=float)
    areas, basis = _p1_geometry(mesh)
    w = areas if cfg.weighting == "element-area" else np.ones_like(areas)
    g = np.einsum("mi,mie->me", sigma[mesh.elements], basis)
    coeff = w / np.sqrt(g[:, 0] ** 2 + g[:, 1] ** 2 + cfg.beta)
    local = np.einsum("m,mie,mje->mij", coeff, basis, basis)
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()


@dataclass
class SsimConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0  # L
    masked: bool = False

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise DimensionMismatchError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise DimensionMismatchError("k1 and k2 must be positive")
        if self.data_range <= 0:
            raise DimensionMismatchError("data range L must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _as_values(img) -> np.ndarray:
    return img.values if isinstance(img, GridImage) else np.asarray(img, dtype=float)


def _as_mask(img) -> np.ndarray | None:
    return img.mask if isinstance(img, GridImage) else None


def _window_stats(x, y, w):
    """Valid-mode window means and population (co)variances via box filters."""
    n = w * w
    kernel = np.ones((w, w)) / n
    mu_x = convolve2d(x, kernel, mode="valid")
    mu_y = convolve2d(y, kernel, mode="valid")
    var_x = convolve2d(x * x, kernel, mode="valid") - mu_x**2
    var_y = convolve2d(y * y, kernel, mode="valid") - mu_y**2
    cov = convolve2d(x * y, kernel, mode="valid") - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _window_selection(x_img, y_img, cfg: SsimConfig) -> np.ndarray:
    """Weight (0/1) per window position; masked mode keeps fully-inside windows."""
    x, y = _as_values(x_img), _as_values(y_img)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.window:
        raise DimensionMismatchError(
            f"images of shape {x.shape} are smaller than the {cfg.window}-pixel window"
        )
    shape = (x.shape[0] - cfg.window + 1, x.shape[1] - cfg.window + 1)
    if not cfg.masked:
        return np.ones(shape)
    mx, my = _as_mask(x_img), _as_mask(y_img)
    joint = np.ones(x.shape, dtype=bool)
    if mx is not None:
        joint &= mx
    if my is not None:
        joint &= my
    covered = convolve2d(joint.astype(float), np.ones((cfg.window, cfg.window)), mode="valid")
    sel = (covered > cfg.window * cfg.window - 0.5).astype(float)
    if sel.sum() == 0:
        raise DimensionMismatchError("mask leaves no window fully inside the domain")
    return sel


def mssim(x_img, y_img, cfg: SsimConfig) -> float:
    """Mean SSIM over all dense window positions (uniform window weights)."""
    x, y = _as_values(x_img), _as_values(y_img)
    sel = _window_selection(x_img, y_img, cfg)
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, cfg.window)
    a1 = 2.0 * mu_x * mu_y + cfg.c1
    a2 = 2.0 * cov + cfg.c2
    b1 = mu_x**2 + mu_y**2 + cfg.c1
    b2 = var_x + var_y + cfg.c2
    s = (a1 * a2) / (b1 * b2)
    return float((s * sel).sum() / sel.sum())


def ssim_loss_grad(x_img, y_img, cfg: SsimConfig) -> tuple[float, np.ndarray]:
    """SSIM loss 1 - mSSIM(x, y) and its exact gradient wrt every pixel of x.

    y is frozen: no gradient flows into the guidance image.
    """
    x, y = _as_values(x_img), _as_values(y_img)
    sel = _window_selection(x_img, y_img, cfg)
    w = cfg.window
    n = w * w
    mu_x, mu_y, var_x, var_y, cov = _window_stats(x, y, w)
    a1 = 2.0 * mu_x * mu_y + cfg.c1
    a2 = 2.0 * cov + cfg.c2
    b1 = mu_x**2 + mu_y**2 + cfg.c1
    b2 = var_x + var_y + cfg.c2
    denom = b1 * b2
    s = (a1 * a2) / denom
    m_total = sel.sum()
    loss = 1.0 - float((s * sel).sum() / m_total)

    # dS_w/dx_i = (2/n) [ mu_y a2 / (b1 b2) + a1 (y_i - mu_y) / (b1 b2)
    #                     - S mu_x / b1 - S (x_i - mu_x) / b2 ]
    # Split into per-window coefficients of 1, y_i, x_i and scatter each back
    # over the pixels its windows cover (full correlation with a ones kernel).
    c_y = a1 / denom
    c_x = -s / b2
    c_1 = (mu_y * a2) / denom - s * mu_x / b1 - c_y * mu_y - c_x * mu_x
    scale = -(2.0 / n) / m_total  # minus: loss is 1 - mean SSIM
    ones = np.ones((w, w))
    acc_1 = convolve2d(c_1 * sel, ones, mode="full")
    acc_y = convolve2d(c_y * sel, ones, mode="full")
    acc_x = convolve2d(c_x * sel, ones, mode="full")
    grad = scale * (acc_1 + acc_y * y + acc_x * x)
    return loss, grad
