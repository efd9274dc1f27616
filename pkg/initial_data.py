"""Localized divergence-free initial data, built as the curl of a scalar (2D) or vector (3D) potential."""

import logging
from typing import Tuple

import numpy as np

from spectral_core import GridSpec, ResolutionError, VectorField, check_localized, curl

logger = logging.getLogger(__name__)

KINDS = ("gaussian_vortex", "moment_free", "multipole", "random_solenoidal")


def _envelope(grid: GridSpec, width: float) -> np.ndarray:
    return np.exp(-grid.radius ** 2 / width ** 2)


def _lift(grid: GridSpec, psi: np.ndarray):
    """Scalar potential in 2D, potential along e_3 in 3D."""
    if grid.dim == 2:
        return psi
    if grid.dim == 3:
        zero = np.zeros(grid.shape)
        return np.stack([zero, zero, np.broadcast_to(psi, grid.shape)])
    raise ValueError(f"initial data is generated for dim 2 and 3, got {grid.dim}")


def gaussian_vortex(grid: GridSpec, amplitude: float = 1.0, width: float = 1.0) -> VectorField:
    """curl of A exp(-|x|^2/w^2); in 2D int y_2 a_1 = -int y_1 a_2 = A pi w^2."""
    return curl(grid, _lift(grid, amplitude * _envelope(grid, width)))


def moment_free(grid: GridSpec, amplitude: float = 1.0, width: float = 1.0, skew: float = 0.0) -> VectorField:
    """curl of A x_1 (x_2 + skew) exp(-|x|^2/w^2); every first moment vanishes by oddness in x_1."""
    x1, x2 = grid.mesh[0], grid.mesh[1]
    psi = amplitude * x1 * (x2 + skew * width) * _envelope(grid, width) / width ** 2
    return curl(grid, _lift(grid, psi))


def multipole(grid: GridSpec, amplitude: float = 1.0, width: float = 1.0) -> VectorField:
    """curl of A (s^3 - 3s/2) exp(-|x|^2/w^2), s = x_1/w: a third x_1 derivative of the Gaussian.

    Every moment of order three or less vanishes while int int u_1^2 and int int u_2^2 differ.
    """
    s = grid.mesh[0] / width
    psi = amplitude * (s ** 3 - 1.5 * s) * _envelope(grid, width)
    return curl(grid, _lift(grid, psi))


def _band_limited_noise(grid: GridSpec, rng: np.random.Generator, band: Tuple[float, float], width: float) -> np.ndarray:
    noise = rng.standard_normal(grid.shape)
    spectrum = grid.forward(noise)
    k = np.sqrt(grid.k_squared) * width
    spectrum = np.where((k >= band[0]) & (k <= band[1]), spectrum, 0.0)
    field = grid.inverse(spectrum)
    peak = float(np.max(np.abs(field)))
    return field / peak if peak > 0 else field


def random_solenoidal(grid: GridSpec, amplitude: float = 1.0, width: float = 1.0, seed: int = 0,
                      band: Tuple[float, float] = (0.5, 3.0)) -> VectorField:
    """curl of a band-limited random potential under a Gaussian envelope; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    envelope = _envelope(grid, width)
    if grid.dim == 2:
        potential = amplitude * _band_limited_noise(grid, rng, band, width) * envelope
    elif grid.dim == 3:
        potential = np.stack([amplitude * _band_limited_noise(grid, rng, band, width) * envelope for _ in range(3)])
    else:
        raise ValueError(f"initial data is generated for dim 2 and 3, got {grid.dim}")
    return curl(grid, potential)


def generate_data(grid: GridSpec, kind: str, amplitude: float = 1.0, width: float = 1.0, skew: float = 0.0,
                  seed: int = 0) -> VectorField:
    if kind not in KINDS:
        raise ValueError(f"unknown data kind {kind!r}, expected one of {KINDS}")
    if width < 4 * grid.dx:
        raise ResolutionError(f"width {width} is resolved by {width / grid.dx:.1f} cells, fewer than 4")
    if kind == "gaussian_vortex":
        a = gaussian_vortex(grid, amplitude, width)
    elif kind == "moment_free":
        a = moment_free(grid, amplitude, width, skew)
    elif kind == "multipole":
        a = multipole(grid, amplitude, width)
    else:
        a = random_solenoidal(grid, amplitude, width, seed)
    check_localized(a)
    logger.debug(f"{kind}: amplitude {amplitude}, width {width}, max|a| {a.max_abs():.4g}")
    return a
