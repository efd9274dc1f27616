""" Spectral field algebra on a centered periodic box

    The box [-L/2, L/2)^n with N points per axis stands in for R^n.  Grid point i along an axis
    sits at x = (i - N/2) dx, so the origin is a grid point and moments are taken about the box
    centre.

    Fields are held either as physical samples (real, shape (components..., N, ..., N)) or in the
    real-to-complex layout of scipy.fft.rfftn over the trailing n axes (last axis N/2+1 long).
    Every operator below is an exact Fourier multiplier:

    heat_propagate       e^{-t|k|^2}
    leray_project        I - xi xi^T / |xi|^2, the xi = 0 mode passed through
    tensor_divergence    [div f]_j = sum_l d_l f_{jl}
    apply_F              e^{tD} P div, the kernel F(x,t) of the Duhamel terms

    Odd multipliers use the reduced wave vector xi, which is k with its Nyquist entries zeroed.
    Divergence and the projector share xi, so projected fields are divergence free to rounding.
    The heat multiplier uses the true |k|^2.

    Products of fields are dealiased with the 2/3 rule: both factors are truncated, multiplied in
    physical space, transformed back and truncated again.

    Space integrals are trapezoidal sums over the grid.

    FIELD CONTAINER (see fieldio.py) stores (dim, N, L, components, representation) followed by the
    row-major float64 component arrays.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.fft

from utils import fft_workers

logger = logging.getLogger(__name__)

PHYSICAL = "physical"
SPECTRAL = "spectral"

BOUNDARY_ENERGY_LIMIT = 1e-6


class LocalizationError(ValueError):
    """Data is not contained in the computational box."""


class ResolutionError(ValueError):
    """A profile, field or time step is not resolved by the discretisation."""


@dataclass(frozen=True)
class GridSpec:
    dim: int
    points_per_axis: int
    box_length: float
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        N = self.points_per_axis
        if self.dim < 2:
            raise ValueError(f"dim must be at least 2, got {self.dim}")
        if N < 16 or N & (N - 1):
            raise ValueError(f"points_per_axis must be a power of two >= 16, got {N}")
        if not self.box_length > 0:
            raise ValueError(f"box_length must be positive, got {self.box_length}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError(f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction}")
        if self.dim > 3:
            logger.warning(f"dim={self.dim}: only n in (2, 3) is exercised by the experiments")

    @property
    def dx(self) -> float:
        return self.box_length / self.points_per_axis

    @property
    def cell_volume(self) -> float:
        return self.dx ** self.dim

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def spectral_shape(self) -> Tuple[int, ...]:
        N = self.points_per_axis
        return (N,) * (self.dim - 1) + (N // 2 + 1,)

    @property
    def axes(self) -> Tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    @property
    def window_time(self) -> float:
        """Largest t with sqrt(t) <= L/8, the end of the whole-space validity window."""
        return (self.box_length / 8.0) ** 2

    @property
    def min_window_time(self) -> float:
        """Smallest t with sqrt(t) >= 8 dx."""
        return (8.0 * self.dx) ** 2

    def _axis_shape(self, axis: int) -> list:
        shape = [1] * self.dim
        shape[axis] = -1
        return shape

    @cached_property
    def coordinates(self) -> np.ndarray:
        N = self.points_per_axis
        return (np.arange(N) - N // 2) * self.dx

    @cached_property
    def mesh(self) -> Tuple[np.ndarray, ...]:
        """Sparse, broadcastable coordinate arrays."""
        return tuple(self.coordinates.reshape(self._axis_shape(axis)) for axis in range(self.dim))

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(x ** 2 for x in self.mesh))

    @cached_property
    def modes(self) -> Tuple[np.ndarray, ...]:
        """Integer mode numbers per axis, sparse and broadcastable over spectral_shape."""
        N = self.points_per_axis
        full = np.fft.fftfreq(N, 1.0 / N).round().astype(np.int64)
        half = np.arange(N // 2 + 1, dtype=np.int64)
        out = []
        for axis in range(self.dim):
            m = half if axis == self.dim - 1 else full
            out.append(m.reshape(self._axis_shape(axis)))
        return tuple(out)

    @cached_property
    def wavevector(self) -> Tuple[np.ndarray, ...]:
        return tuple(2 * np.pi / self.box_length * m for m in self.modes)

    @cached_property
    def reduced_wavevector(self) -> Tuple[np.ndarray, ...]:
        nyquist = self.points_per_axis // 2
        return tuple(np.where(np.abs(m) == nyquist, 0.0, k) for m, k in zip(self.modes, self.wavevector))

    @cached_property
    def k_squared(self) -> np.ndarray:
        return np.zeros(self.spectral_shape) + sum(k ** 2 for k in self.wavevector)

    @cached_property
    def xi_squared(self) -> np.ndarray:
        return np.zeros(self.spectral_shape) + sum(xi ** 2 for xi in self.reduced_wavevector)

    @property
    def k_max(self) -> float:
        return np.pi / self.dx

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        cutoff = self.dealias_fraction * self.points_per_axis / 2
        mask = np.ones(self.spectral_shape, dtype=bool)
        for m in self.modes:
            mask = mask & (np.abs(m) <= cutoff)
        return mask

    @cached_property
    def origin_phase(self) -> np.ndarray:
        """Spectrum of a unit impulse at the centre grid point."""
        parity = np.zeros(self.spectral_shape, dtype=np.int64) + sum(self.modes)
        return np.where(parity % 2 == 0, 1.0, -1.0)

    def boundary_band(self) -> np.ndarray:
        """Boolean mask of the cells within N/16 (at least 2) cells of a box face."""
        N = self.points_per_axis
        width = max(2, N // 16)
        index = np.arange(N)
        edge = (index < width) | (index >= N - width)
        band = np.zeros(self.shape, dtype=bool)
        for axis in range(self.dim):
            band = band | edge.reshape(self._axis_shape(axis))
        return band

    def forward(self, data: np.ndarray) -> np.ndarray:
        return scipy.fft.rfftn(data, axes=self.axes, workers=fft_workers())

    def inverse(self, data: np.ndarray) -> np.ndarray:
        return scipy.fft.irfftn(data, s=self.shape, axes=self.axes, workers=fft_workers())

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoidal integral over the trailing n axes."""
        return np.sum(values, axis=self.axes) * self.cell_volume

    def kernel_hat(self, multiplier: np.ndarray) -> np.ndarray:
        """Spectral samples of the centred kernel whose Fourier transform is `multiplier`."""
        return multiplier * self.origin_phase / self.cell_volume

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "points_per_axis": self.points_per_axis,
            "box_length": self.box_length,
            "dealias_fraction": self.dealias_fraction,
        }


@dataclass(frozen=True, eq=False)
class _Field:
    grid: GridSpec
    data: np.ndarray
    representation: str = PHYSICAL
    rank: ClassVar[int] = 1

    def __post_init__(self):
        if self.representation not in (PHYSICAL, SPECTRAL):
            raise ValueError(f"unknown representation {self.representation!r}")
        spatial = self.grid.shape if self.representation == PHYSICAL else self.grid.spectral_shape
        expected = (self.grid.dim,) * self.rank + spatial
        dtype = np.float64 if self.representation == PHYSICAL else np.complex128
        data = np.asarray(self.data, dtype=dtype)
        if data.shape != expected:
            raise ValueError(f"{type(self).__name__} data has shape {data.shape}, expected {expected}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid: GridSpec, representation: str = PHYSICAL):
        spatial = grid.shape if representation == PHYSICAL else grid.spectral_shape
        dtype = np.float64 if representation == PHYSICAL else np.complex128
        return cls(grid, np.zeros((grid.dim,) * cls.rank + spatial, dtype=dtype), representation)

    def replace(self, data: np.ndarray, representation: Optional[str] = None):
        return type(self)(self.grid, data, representation or self.representation)

    def spectral(self):
        if self.representation == SPECTRAL:
            return self
        return self.replace(self.grid.forward(self.data), SPECTRAL)

    def physical(self):
        if self.representation == PHYSICAL:
            return self
        return self.replace(self.grid.inverse(self.data), PHYSICAL)

    def as_representation(self, representation: str):
        return self.spectral() if representation == SPECTRAL else self.physical()

    def _coerce(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")
        return other.as_representation(self.representation)

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self.replace(self.data + other.data)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self.replace(self.data - other.data)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return self.replace(self.data * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.replace(-self.data)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.physical().data))) if self.data.size else 0.0


@dataclass(frozen=True, eq=False)
class VectorField(_Field):
    rank: ClassVar[int] = 1

    def magnitude(self) -> np.ndarray:
        values = self.physical().data
        return np.sqrt(np.sum(values ** 2, axis=0))


@dataclass(frozen=True, eq=False)
class TensorField(_Field):
    rank: ClassVar[int] = 2
    symmetric: bool = field(init=False, default=False)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "symmetric", bool(np.array_equal(self.data, self.data.swapaxes(0, 1))))


@dataclass
class NormReport:
    lp_values: Dict[float, float]
    weighted_first_moment: float
    first_moments: np.ndarray

    def to_dict(self) -> dict:
        return {
            "lp_values": {repr(float(p)): v for p, v in sorted(self.lp_values.items())},
            "weighted_first_moment": self.weighted_first_moment,
            "first_moments": self.first_moments.tolist(),
        }


def _check_time(t: float, strict: bool = False):
    if not np.isfinite(t):
        raise ValueError(f"time must be finite, got {t}")
    if t < 0 or (strict and t == 0):
        raise ValueError(f"time must be {'positive' if strict else 'nonnegative'}, got {t}")


def heat_hat(grid: GridSpec, data_hat: np.ndarray, t: float) -> np.ndarray:
    return data_hat * np.exp(-t * grid.k_squared)


def leray_hat(grid: GridSpec, u_hat: np.ndarray) -> np.ndarray:
    xi = grid.reduced_wavevector
    xi2 = grid.xi_squared
    dot = sum(xi[j] * u_hat[j] for j in range(grid.dim))
    factor = np.where(xi2 > 0, dot / np.where(xi2 > 0, xi2, 1.0), 0.0)
    return np.stack([u_hat[j] - xi[j] * factor for j in range(grid.dim)])


def divergence_hat(grid: GridSpec, f_hat: np.ndarray) -> np.ndarray:
    """[div f]_j = sum_l i xi_l f_{jl}; for a vector input returns the scalar divergence."""
    xi = grid.reduced_wavevector
    if f_hat.ndim == grid.dim + 1:
        return sum(1j * xi[l] * f_hat[l] for l in range(grid.dim))
    return np.stack([sum(1j * xi[l] * f_hat[j, l] for l in range(grid.dim)) for j in range(grid.dim)])


def kernel_F_hat(grid: GridSpec, f_hat: np.ndarray, t: float) -> np.ndarray:
    """Combined multiplier i xi_l (delta_jk - xi_j xi_k/|xi|^2) e^{-t|k|^2} acting on f_kl."""
    xi = grid.reduced_wavevector
    xi2 = grid.xi_squared
    damping = np.exp(-t * grid.k_squared)
    d = [sum(1j * xi[l] * f_hat[k, l] for l in range(grid.dim)) for k in range(grid.dim)]
    factor = np.where(xi2 > 0, sum(xi[k] * d[k] for k in range(grid.dim)) / np.where(xi2 > 0, xi2, 1.0), 0.0)
    return np.stack([(d[j] - xi[j] * factor) * damping for j in range(grid.dim)])


def product_hat(grid: GridSpec, u_hat: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
    """Dealiased spectrum of u (x) v, shape (n, n, spectral...)."""
    mask = grid.dealias_mask
    up = grid.inverse(u_hat * mask)
    vp = up if v_hat is u_hat else grid.inverse(v_hat * mask)
    n = grid.dim
    out = np.empty((n, n) + grid.spectral_shape, dtype=np.complex128)
    for j in range(n):
        for k in range(n):
            if vp is up and k < j:
                out[j, k] = out[k, j]
                continue
            out[j, k] = grid.forward(up[j] * vp[k]) * mask
    return out


def heat_propagate(u, t: float):
    _check_time(t)
    spectral = u.spectral()
    return spectral.replace(heat_hat(u.grid, spectral.data, t)).as_representation(u.representation)


def leray_project(u: VectorField) -> VectorField:
    spectral = u.spectral()
    return spectral.replace(leray_hat(u.grid, spectral.data)).as_representation(u.representation)


def tensor_divergence(f: TensorField) -> VectorField:
    spectral = f.spectral()
    out = VectorField(f.grid, divergence_hat(f.grid, spectral.data), SPECTRAL)
    return out.as_representation(f.representation)


def apply_F(f: TensorField, t: float) -> VectorField:
    _check_time(t, strict=True)
    spectral = f.spectral()
    out = VectorField(f.grid, kernel_F_hat(f.grid, spectral.data, t), SPECTRAL)
    return out.as_representation(f.representation)


def outer_product(u: VectorField, v: VectorField) -> TensorField:
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    uh = u.spectral().data
    vh = uh if v is u else v.spectral().data
    return TensorField(u.grid, product_hat(u.grid, uh, vh), SPECTRAL)


def divergence(u: VectorField) -> np.ndarray:
    """Physical samples of the scalar divergence."""
    return u.grid.inverse(divergence_hat(u.grid, u.spectral().data))


def max_divergence(u: VectorField) -> float:
    return float(np.max(np.abs(divergence(u))))


def divergence_scale(u: VectorField) -> float:
    """max|u| * max|xi|, the natural size of a discrete derivative of u."""
    return u.max_abs() * u.grid.k_max


def curl(grid: GridSpec, potential: np.ndarray) -> VectorField:
    """Perpendicular gradient (-d2 psi, d1 psi) of a scalar in 2D, curl of a vector potential in 3D."""
    xi = grid.reduced_wavevector
    if grid.dim == 2:
        ph = grid.forward(np.asarray(potential, dtype=float))
        data = np.stack([-1j * xi[1] * ph, 1j * xi[0] * ph])
    elif grid.dim == 3:
        A = [grid.forward(np.asarray(potential[i], dtype=float)) for i in range(3)]
        data = np.stack([
            1j * xi[1] * A[2] - 1j * xi[2] * A[1],
            1j * xi[2] * A[0] - 1j * xi[0] * A[2],
            1j * xi[0] * A[1] - 1j * xi[1] * A[0],
        ])
    else:
        raise ValueError(f"curl is defined for dim 2 and 3, got {grid.dim}")
    return VectorField(grid, grid.inverse(data), PHYSICAL)


def gradient(grid: GridSpec, scalar: np.ndarray) -> VectorField:
    sh = grid.forward(np.asarray(scalar, dtype=float))
    data = np.stack([1j * xi * sh for xi in grid.reduced_wavevector])
    return VectorField(grid, grid.inverse(data), PHYSICAL)


def lp_norm(grid: GridSpec, magnitude: np.ndarray, p: float, weight: Optional[np.ndarray] = None) -> float:
    """Trapezoidal L^p norm of a pointwise magnitude; p = inf gives the maximum."""
    if np.isinf(p):
        values = magnitude if weight is None else magnitude * (weight > 0)
        return float(np.max(values)) if values.size else 0.0
    integrand = magnitude ** p
    if weight is not None:
        integrand = integrand * weight
    return float((np.sum(integrand) * grid.cell_volume) ** (1.0 / p))


def boundary_energy_fraction(a: VectorField) -> float:
    energy = np.sum(a.physical().data ** 2, axis=0)
    total = float(np.sum(energy))
    if total == 0:
        return 0.0
    return float(np.sum(energy[a.grid.boundary_band()])) / total


def check_localized(a: VectorField, limit: float = BOUNDARY_ENERGY_LIMIT):
    fraction = boundary_energy_fraction(a)
    if fraction > limit:
        raise LocalizationError(f"boundary-band energy fraction {fraction:.3e} exceeds {limit:.0e}; "
                                f"data is not contained in the box of length {a.grid.box_length}")
    return fraction


def norms_and_moments(a: VectorField, exponents: Iterable[float] = (1, 2)) -> NormReport:
    check_localized(a)
    grid = a.grid
    values = a.physical().data
    magnitude = np.sqrt(np.sum(values ** 2, axis=0))
    lp_values = {float(p): lp_norm(grid, magnitude, float(p)) for p in exponents}
    weighted = float(np.sum(grid.radius * magnitude) * grid.cell_volume)
    moments = np.array([[float(np.sum(grid.mesh[k] * values[j]) * grid.cell_volume)
                         for j in range(grid.dim)] for k in range(grid.dim)])
    return NormReport(lp_values, weighted, moments)


def impulse_tensor(grid: GridSpec, pairs: Sequence[Tuple[int, int]]) -> TensorField:
    """Spectral tensor with a unit-mass discrete impulse at the origin in the listed components."""
    data = np.zeros((grid.dim, grid.dim) + grid.spectral_shape, dtype=np.complex128)
    for k, l in pairs:
        data[k, l] = grid.kernel_hat(np.ones(grid.spectral_shape))
    return TensorField(grid, data, SPECTRAL)


def kernel_F(grid: GridSpec, t: float, pairs: Sequence[Tuple[int, int]] = ((0, 1), (1, 0))) -> VectorField:
    """Samples of sum over the listed (k, l) of F_{lk,.}(x, t)."""
    return apply_F(impulse_tensor(grid, pairs), t).physical()


def self_similar_weight(grid: GridSpec, t: float) -> np.ndarray:
    return np.exp(-grid.radius ** 2 / t)


def kernel_norm(grid: GridSpec, t: float, p: float, weighted: bool = True,
                pairs: Sequence[Tuple[int, int]] = ((0, 1), (1, 0))) -> float:
    """L^p norm of F(., t) with the self-similar weight exp(-|x|^2/t).

    The weight is a function of x/sqrt(t), so the time exponent of the norm is the same as for the
    unweighted whole-space norm, while the slowly decaying tail that the periodic box distorts is
    suppressed.
    """
    F = kernel_F(grid, t, pairs)
    weight = self_similar_weight(grid, t) if weighted else None
    return lp_norm(grid, F.magnitude(), p, weight)


def F_norm_exponent(dim: int, p: float) -> float:
    return -(dim + 1) / 2.0 + dim / (2.0 * p)
