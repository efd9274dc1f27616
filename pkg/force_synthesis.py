""" Synthesis of a compactly supported force that makes a small flow rapidly dissipative

    The outer loop alternates a flow solve and a moment computation:

        f^(0) = 0
        u^(m)  = mild solution from a driven by div f^(m)
        c^(m)  = int_0^inf int u^(m)_k u^(m)_l dx dt          (MomentMatrix)
        f^(m+1)_kl = (c^(m)_kl - cbar^(m) delta_kl) phi(x, t)   cbar = trace c

    with phi a fixed profile of unit space-time integral.  At the fixed point the flux matrix minus
    the force integral is cbar I, a scalar matrix.

    phi(x, t) = R^{-n} Phi(x/R, t) is obtained from space-time samples of a profile Psi on the lattice
    [-M, M]^n x [0, T0].  On the computational grid phi is linearly interpolated in space, piecewise
    linear in time between the lattice times, and renormalised so its discrete integral is one.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import cbor2
import numpy as np
import scipy.signal
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erf

from fieldio import write_field
from mild_solver import (Forcing, PicardConfig, SmallnessViolation, TimeGrid, Trajectory, ZeroForcing, envelope_tail,
                         integrate, picard_iterate)
from spectral_core import (GridSpec, PHYSICAL, ResolutionError, TensorField, VectorField, kernel_F_hat,
                           norms_and_moments)

logger = logging.getLogger(__name__)

CALIBRATION_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "calibration", "empirical_constants.json")
DEGENERACY_LIMIT = 1e-8
HORIZON_TOLERANCE = 1e-3
REQUIRED_MARGIN = 0.1
MAX_DENOMINATOR = 8
# successive outer ratios above this count as a failed contraction in reports
OUTER_RATIO_LIMIT = 0.9


class DegenerateProfileError(ValueError):
    """The profile has zero space-time integral."""


class BoxTooSmallError(ValueError):
    def __init__(self, message: str, needed_length: float):
        super().__init__(message)
        self.needed_length = needed_length


class InsufficientHorizonError(RuntimeError):
    def __init__(self, message: str, tail_bound: float, norm: float):
        super().__init__(message)
        self.tail_bound = tail_bound
        self.norm = norm


class SynthesisDivergence(RuntimeError):
    def __init__(self, message: str, c_history: Sequence["MomentMatrix"]):
        super().__init__(message)
        self.c_history = list(c_history)


@dataclass(frozen=True)
class Calibration:
    """Measured stand-ins for the dimensional constants of the small-data theory."""
    dim: int
    gamma: float
    delta: float
    delta_prime: float
    delta_double_prime: float
    c1: float
    version: int = 0

    def to_dict(self) -> dict:
        return {"dim": self.dim, "gamma": self.gamma, "delta": self.delta, "delta_prime": self.delta_prime,
                "delta_double_prime": self.delta_double_prime, "c1": self.c1, "version": self.version}


def load_calibration(dim: int, path: str = CALIBRATION_PATH) -> Calibration:
    with open(path) as f:
        data = json.load(f)
    constants = data["dimensions"].get(str(dim))
    if constants is None:
        raise ValueError(f"{path} has no constants for dim={dim}")
    return Calibration(dim=dim, version=data["version"], **constants)


@dataclass
class MomentMatrix:
    entries: np.ndarray
    t_cut: float
    tail_bound: float = 0.0

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    @property
    def frobenius(self) -> float:
        return float(np.linalg.norm(self.entries))

    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.entries)))

    def to_dict(self) -> dict:
        return {"entries": self.entries.tolist(), "trace": self.trace, "t_cut": self.t_cut,
                "tail_bound": self.tail_bound}

    @classmethod
    def from_dict(cls, d: dict) -> "MomentMatrix":
        return cls(np.array(d["entries"], dtype=float), d["t_cut"], d["tail_bound"])


class ForceProfile:
    """ Normalised space-time samples of phi = R^{-n} Phi(./R, t).

        samples has shape (time points, Ny, ..., Ny) on the lattice linspace(-M, M, Ny)^n at the
        uniform times linspace(0, T0, time points); its lattice integral is one.
    """

    def __init__(self, samples: np.ndarray, times: np.ndarray, half_width: float, normalization: float = 1.0,
                 radius: float = 1.0, name: str = "custom"):
        samples = np.asarray(samples, dtype=float)
        times = np.asarray(times, dtype=float)
        if samples.ndim < 3:
            raise ValueError(f"profile samples need a time axis and at least 2 space axes, got {samples.shape}")
        if samples.shape[0] != len(times) or len(times) < 2:
            raise ValueError(f"{len(times)} lattice times for {samples.shape[0]} time samples")
        if times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ValueError("lattice times must start at 0 and increase")
        if not half_width > 0 or not radius > 0:
            raise ValueError(f"half_width and radius must be positive, got {half_width}, {radius}")
        samples.flags.writeable = False
        self.samples = samples
        self.times = times
        self.half_width = float(half_width)
        self.normalization = float(normalization)
        self.radius = float(radius)
        self.name = name
        self._grid_cache: Dict[GridSpec, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def dim(self) -> int:
        return self.samples.ndim - 1

    @property
    def time_extent(self) -> float:
        return float(self.times[-1])

    @property
    def support_half_width(self) -> float:
        """Half width of the spatial support of phi, M R."""
        return self.half_width * self.radius

    @property
    def lattice(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.samples.shape[1])

    def with_radius(self, radius: float) -> "ForceProfile":
        return ForceProfile(self.samples, self.times, self.half_width, self.normalization, radius, self.name)

    def _space_integral(self, values: np.ndarray, spacing: float) -> np.ndarray:
        for _ in range(self.dim):
            values = trapezoid(values, dx=spacing, axis=-1)
        return values

    def integral(self) -> float:
        """Lattice integral of phi over space and time; one up to rounding."""
        spacing = self.radius * (self.lattice[1] - self.lattice[0])
        per_time = self._space_integral(self.samples * self.radius ** -self.dim, spacing)
        return float(trapezoid(per_time, self.times))

    def norm_series(self, p: float) -> np.ndarray:
        """||phi(s)||_p at the lattice times, on the lattice scaled by R."""
        values = np.abs(self.samples) * self.radius ** -self.dim
        if np.isinf(p):
            return values.reshape(len(self.times), -1).max(axis=1)
        spacing = self.radius * (self.lattice[1] - self.lattice[0])
        return self._space_integral(values ** p, spacing) ** (1.0 / p)

    def weighted_sup(self, p: float, exponent: float, before: Optional[float] = None) -> float:
        """sup over lattice times s (s < before if given) of s^exponent ||phi(s)||_p."""
        series = self.norm_series(p)
        mask = self.times > 0
        if before is not None:
            mask &= self.times < before
        if not np.any(mask):
            return 0.0
        return float(np.max(self.times[mask] ** exponent * series[mask]))

    def time_integral(self, p: float) -> float:
        return float(trapezoid(self.norm_series(p), self.times))

    def needed_box_length(self, grid: GridSpec) -> float:
        """Smallest box length, at this grid's points per axis, that holds the support clear of the edge band."""
        band = max(2, grid.points_per_axis // 16)
        return 2 * self.support_half_width / (1 - 2.0 * band / grid.points_per_axis)

    def check_fits(self, grid: GridSpec):
        width = 2 * self.support_half_width / grid.dx
        if width < 4:
            raise ResolutionError(f"profile support spans {width:.1f} cells, fewer than 4")
        needed = self.needed_box_length(grid)
        if needed > grid.box_length:
            raise BoxTooSmallError(f"profile of half width {self.support_half_width:.4g} does not fit the box "
                                   f"of length {grid.box_length}; needs L >= {needed:.4g}", needed)

    def on_grid(self, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
        """(lattice times, samples of phi on the grid at those times) with unit discrete integral."""
        if grid.dim != self.dim:
            raise ValueError(f"profile has dim {self.dim}, grid has dim {grid.dim}")
        if grid in self._grid_cache:
            return self._grid_cache[grid]
        self.check_fits(grid)
        axes = (self.lattice,) * self.dim
        mesh = np.meshgrid(*([grid.coordinates / self.radius] * self.dim), indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=-1)
        values = np.empty((len(self.times),) + grid.shape)
        for j in range(len(self.times)):
            interp = RegularGridInterpolator(axes, self.samples[j], method="linear", bounds_error=False,
                                             fill_value=0.0)
            values[j] = interp(points).reshape(grid.shape) * self.radius ** -self.dim
        total = float(trapezoid([grid.integrate(v) for v in values], self.times))
        if abs(total) < DEGENERACY_LIMIT * float(trapezoid([grid.integrate(np.abs(v)) for v in values], self.times)):
            raise DegenerateProfileError(f"profile {self.name} integrates to {total:.3e} on the grid")
        values /= total
        values.flags.writeable = False
        self._grid_cache[grid] = (self.times, values)
        return self.times, values

    def to_dict(self) -> dict:
        return {"name": self.name, "half_width": self.half_width, "time_extent": self.time_extent,
                "radius": self.radius, "normalization": self.normalization,
                "lattice_points": self.samples.shape[1], "time_points": len(self.times)}


def normalize_profile(samples: np.ndarray, times: np.ndarray, half_width: float, name: str = "custom") -> ForceProfile:
    """phi = Psi / int int Psi on the sample lattice."""
    raw = ForceProfile(samples, times, half_width, name=name)
    integral = raw.integral()
    magnitude = ForceProfile(np.abs(raw.samples), times, half_width).integral()
    if magnitude == 0 or abs(integral) < DEGENERACY_LIMIT * magnitude:
        raise DegenerateProfileError(f"profile {name} has space-time integral {integral:.3e} "
                                     f"against L1 norm {magnitude:.3e}")
    logger.debug(f"profile {name}: integral {integral:.6g}")
    return ForceProfile(raw.samples / integral, times, half_width, integral, 1.0, name)


def _plateau(y: np.ndarray, edge: float = 0.8, width: float = 0.1) -> np.ndarray:
    """Smoothed indicator of [-edge, edge], cut off at |y| = 1."""
    values = 0.5 * (erf((y + edge) / width) - erf((y - edge) / width))
    return np.where(np.abs(y) <= 1, values, 0.0)


def _lattice(dim: int, points: int) -> Tuple[np.ndarray, ...]:
    y = np.linspace(-1.0, 1.0, points)
    return tuple(np.meshgrid(*([y] * dim), indexing="ij"))


def default_profile(dim: int, time_extent: float = 0.25, points: int = 65, time_points: int = 33) -> ForceProfile:
    """Smooth plateau on [-1, 1]^n times sin^2(pi t/T0) on [0, T0]."""
    mesh = _lattice(dim, points)
    space = np.prod([_plateau(y) for y in mesh], axis=0)
    times = np.linspace(0.0, time_extent, time_points)
    samples = np.sin(np.pi * times / time_extent)[(slice(None),) + (None,) * dim] ** 2 * space[None]
    return normalize_profile(samples, times, 1.0, "bump")


def asymmetric_profile(dim: int, time_extent: float = 0.1, points: int = 65, time_points: int = 33) -> ForceProfile:
    """A lopsided bump: tilted in space, skewed toward early times."""
    mesh = _lattice(dim, points)
    tilt = 1.0 + 0.6 * mesh[0] - 0.3 * mesh[1]
    space = tilt * np.prod([_plateau(y, edge=0.6, width=0.2) for y in mesh], axis=0)
    times = np.linspace(0.0, time_extent, time_points)
    s = times / time_extent
    samples = (s * (1 - s) ** 2)[(slice(None),) + (None,) * dim] * space[None]
    return normalize_profile(samples, times, 1.0, "asymmetric")


def profile_from_samples(path: str) -> ForceProfile:
    """Load Psi from an .npz with arrays samples, times and half_width."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"profile file {path} not found")
    with np.load(path) as data:
        return normalize_profile(data["samples"], data["times"], float(data["half_width"]),
                                 os.path.basename(path))


class ProfileForcing(Forcing):
    """f_kl(x, t) = coefficients_kl phi(x, t) with phi piecewise linear in time between lattice times."""

    def __init__(self, grid: GridSpec, coefficients: np.ndarray, times: np.ndarray, values: np.ndarray):
        super().__init__(grid, (float(times[0]), float(times[-1])))
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (grid.dim, grid.dim):
            raise ValueError(f"coefficients must be {grid.dim}x{grid.dim}, got {coefficients.shape}")
        coefficients.flags.writeable = False
        self.coefficients = coefficients
        self.times = np.asarray(times, dtype=float)
        self.values = values
        self.breakpoints = tuple(float(t) for t in self.times)
        self.spectra = grid.forward(values)
        ones = np.ones(grid.spectral_shape, dtype=np.complex128)
        self.direction = kernel_F_hat(grid, coefficients[(...,) + (None,) * grid.dim] * ones, 0.0)

    @classmethod
    def from_profile(cls, grid: GridSpec, coefficients: np.ndarray, profile: ForceProfile) -> "ProfileForcing":
        times, values = profile.on_grid(grid)
        return cls(grid, coefficients, times, values)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coefficients)

    def _interpolate(self, t: float, table: np.ndarray) -> np.ndarray:
        if not self.times[0] <= t <= self.times[-1]:
            return np.zeros_like(table[0])
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - w) * table[j] + w * table[j + 1]

    def phi_hat(self, t: float) -> np.ndarray:
        return self._interpolate(t, self.spectra)

    def tensor_hat(self, t: float) -> np.ndarray:
        return self.coefficients[(...,) + (None,) * self.grid.dim] * self.phi_hat(t)

    def driving_hat(self, t: float) -> np.ndarray:
        return self.direction * self.phi_hat(t)

    def factorized(self):
        return self.direction, self.phi_hat

    def tensor_field(self, t: float) -> TensorField:
        phi = self._interpolate(t, self.values)
        return TensorField(self.grid, self.coefficients[(...,) + (None,) * self.grid.dim] * phi, PHYSICAL)

    def phi_integral(self) -> float:
        return float(trapezoid([self.grid.integrate(v) for v in self.values], self.times))

    def integral(self) -> np.ndarray:
        return self.coefficients * self.phi_integral()

    def check_resolution(self):
        occupied = np.any(self.values != 0, axis=0)
        if not np.any(occupied):
            return
        cells = min(int(np.count_nonzero(np.any(occupied, axis=tuple(a for a in range(self.grid.dim) if a != axis))))
                    for axis in range(self.grid.dim))
        if cells < 4:
            raise ResolutionError(f"force support spans {cells} grid cells, fewer than 4")

    def rescaled(self, lam: float) -> "ProfileForcing":
        """The force lam^-2 f(x/lam, t/lam^2) on the box lam times larger."""
        grid = GridSpec(self.grid.dim, self.grid.points_per_axis, self.grid.box_length * lam,
                        self.grid.dealias_fraction)
        return ProfileForcing(grid, self.coefficients, self.times * lam ** 2, self.values * lam ** -2)


def build_force(c: MomentMatrix, profile: ForceProfile, grid: GridSpec) -> ProfileForcing:
    """Off diagonal c_kl phi, diagonal (c_kk - cbar) phi."""
    coefficients = c.entries - c.trace * np.eye(c.dim)
    return ProfileForcing.from_profile(grid, coefficients, profile)


def flux_integral(tr: Trajectory) -> np.ndarray:
    """Running int_0^t int u_k u_l dx ds at every node."""
    return cumulative_trapezoid(tr.flux_series, tr.times, axis=0, initial=0.0)


def choose_t_cut(tr: Trajectory, horizon_tolerance: float = HORIZON_TOLERANCE) -> float:
    """Smallest node whose tail bound is within horizon_tolerance of the running integral, capped by
    the validity window."""
    running = flux_integral(tr)
    cap = min(float(tr.times[-1]), tr.grid.window_time)
    first = tr.times[1]
    candidates = [i for i, t in enumerate(tr.times) if 4 * first <= t <= cap * (1 + 1e-12)]
    for i in candidates:
        norm = float(np.linalg.norm(running[i]))
        if norm == 0:
            continue
        _, tail = envelope_tail(tr, float(tr.times[i]))
        if tail <= horizon_tolerance * norm:
            logger.debug(f"t_cut={tr.times[i]:.4g}: tail {tail:.3e} against {norm:.3e}")
            return float(tr.times[i])
    t_cut = float(tr.times[candidates[-1]]) if candidates else cap
    logger.info(f"tail bound never fell below {horizon_tolerance:.0e} of the flux integral; t_cut={t_cut:.4g}")
    return t_cut


def moment_matrix(tr: Trajectory, t_cut: float, horizon_tolerance: float = HORIZON_TOLERANCE) -> MomentMatrix:
    index = int(np.searchsorted(tr.times, t_cut * (1 + 1e-12), side="right") - 1)
    if index < 1 or t_cut > tr.times[-1] * (1 + 1e-12):
        raise InsufficientHorizonError(f"trajectory ends at {tr.times[-1]:.4g}, before t_cut={t_cut:.4g}", math.inf, 0.0)
    t_cut = float(tr.times[index])
    entries = trapezoid(tr.flux_series[:index + 1], tr.times[:index + 1], axis=0)
    entries = 0.5 * (entries + entries.T)
    norm = float(np.linalg.norm(entries))
    if norm == 0:
        return MomentMatrix(entries, t_cut, 0.0)
    _, tail = envelope_tail(tr, t_cut)
    if tail > horizon_tolerance * norm:
        raise InsufficientHorizonError(f"tail bound {tail:.3e} beyond t_cut={t_cut:.4g} exceeds "
                                       f"{horizon_tolerance:.0e} of the moment matrix norm {norm:.3e}", tail, norm)
    return MomentMatrix(entries, t_cut, tail)


class Functionals(NamedTuple):
    J: float
    K: float
    L: float


def _norm_exponents(n: int) -> Tuple[float, ...]:
    return (1.0, 2.0, float(n), 2.0 * n, 4.0 * n / (3 + 2 * n))


def functionals(a: VectorField, calibration: Optional[Calibration] = None) -> Functionals:
    """J(a), K(a) and L(a) = gamma J^{4/(n+1)} ||a||_2^{2(n-1)/(n+1)}."""
    n = a.grid.dim
    calibration = calibration or load_calibration(n)
    report = norms_and_moments(a, _norm_exponents(n))
    lp = report.lp_values
    first = report.weighted_first_moment
    J = math.sqrt(lp[1.0] * first) + lp[4.0 * n / (3 + 2 * n)] ** 2
    energy_scale = J ** (4.0 / (n + 1)) * lp[2.0] ** (2.0 * (n - 1) / (n + 1))
    return Functionals(J, first + energy_scale, calibration.gamma * energy_scale)


@dataclass
class ConditionResult:
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs

    @property
    def margin(self) -> float:
        """1 - lhs/rhs; 1 for a vanishing left side."""
        if self.lhs == 0:
            return 1.0
        if self.rhs <= 0:
            return -math.inf
        return 1.0 - self.lhs / self.rhs

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "margin": self.margin, "passed": self.passed}


@dataclass
class SmallnessReport:
    conditions: Dict[str, ConditionResult]
    radius: float
    calibration_version: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def profile_conditions(self) -> Dict[str, ConditionResult]:
        return {k: v for k, v in self.conditions.items() if k.startswith("A")}

    @property
    def binding(self) -> str:
        return min(self.conditions, key=lambda k: self.conditions[k].margin)

    def to_dict(self) -> dict:
        return {"conditions": {k: v.to_dict() for k, v in self.conditions.items()}, "radius": self.radius,
                "passed": self.passed, "binding": self.binding, "calibration_version": self.calibration_version}


def check_smallness(a: VectorField, profile: ForceProfile, calibration: Optional[Calibration] = None) -> SmallnessReport:
    """Evaluate (S), (S') and the six profile conditions for a and phi at the profile's radius."""
    n = a.grid.dim
    calibration = calibration or load_calibration(n)
    report = norms_and_moments(a, _norm_exponents(n))
    lp = report.lp_values
    a_n, a_2, a_1 = lp[float(n)], lp[2.0], lp[1.0]
    a_q = lp[4.0 * n / (3 + 2 * n)]
    J, _, L = functionals(a, calibration)
    dual = 2.0 * n / (2 * n - 1)

    late = profile.weighted_sup(2.0, (n + 3) / 4.0)
    integral = profile.time_integral(dual)
    conditions = {
        "S": ConditionResult(a_n, calibration.delta),
        "S_prime": ConditionResult(a_n ** (1.0 / n) * (J ** (1 - 1.0 / n) + a_2 ** (1 - 1.0 / n)), calibration.delta_prime),
        "A1": ConditionResult(L * profile.weighted_sup(2.0 * n, 0.75), a_n),
        "A2": ConditionResult(L * profile.weighted_sup(float(n), 0.5), a_n),
        "A3": ConditionResult(math.pi * calibration.c1 * L * profile.weighted_sup(2.0, 0.5), a_2),
        "A4": ConditionResult(L * profile.weighted_sup(2.0, 7.0 / 8.0), a_q),
        "A5": ConditionResult(L * (integral + late), math.sqrt(report.weighted_first_moment * a_1)),
        "A6": ConditionResult((profile.weighted_sup(2.0, 0.5, before=1.0) + integral + late) * a_q,
                              calibration.delta_double_prime),
    }
    return SmallnessReport(conditions, profile.radius, calibration.version)


def choose_R(a: VectorField, profile: ForceProfile, calibration: Optional[Calibration] = None) -> Tuple[ForceProfile, SmallnessReport]:
    """Double R from 1 until every profile condition holds with a 10% margin."""
    grid = a.grid
    R = 1.0
    while True:
        candidate = profile.with_radius(R)
        needed = candidate.needed_box_length(grid)
        if needed > grid.box_length:
            raise BoxTooSmallError(f"profile conditions fail for every R < {R:g} that fits the box; "
                                   f"R={R:g} needs L >= {needed:.4g}", needed)
        report = check_smallness(a, candidate, calibration)
        failing = [k for k, c in report.profile_conditions().items() if c.margin < REQUIRED_MARGIN]
        if not failing:
            candidate.check_fits(grid)
            binding = min(report.profile_conditions(), key=lambda k: report.conditions[k].margin)
            logger.info(f"R={R:g} satisfies the profile conditions, binding {binding} "
                        f"(margin {report.conditions[binding].margin:.3f})")
            return candidate, report
        logger.debug(f"R={R:g}: {failing} short of the required margin")
        R *= 2


def _resample_axis(values: np.ndarray, grid: GridSpec, lam: Fraction, axis: int) -> np.ndarray:
    """Samples of values at lam x along one axis; zero outside the box."""
    N = grid.points_per_axis
    p, q = lam.numerator, lam.denominator
    fine = scipy.signal.resample(values, q * N, axis=axis) if q > 1 else values
    index = p * (np.arange(N) - N // 2) + q * N // 2
    valid = (index >= 0) & (index < q * N)
    taken = np.take(fine, np.where(valid, index, 0), axis=axis)
    shape = [1] * values.ndim
    shape[axis] = N
    return taken * valid.reshape(shape)


def lambda_rescale(a: VectorField, lam: float) -> VectorField:
    """a_lam(x) = lam a(lam x), sampled by Fourier interpolation."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if lam == 1:
        return a
    grid = a.grid
    fraction = Fraction(lam).limit_denominator(MAX_DENOMINATOR)
    if abs(float(fraction) - lam) > 1e-12 * lam:
        raise ValueError(f"lambda={lam} is not a ratio with denominator <= {MAX_DENOMINATOR}")
    values = a.physical().data
    for axis in range(1, grid.dim + 1):
        values = _resample_axis(values, grid, fraction, axis)
    out = VectorField(grid, lam * values, PHYSICAL)

    energy = np.sum(out.data ** 2, axis=0)
    total = float(np.sum(energy))
    if total > 0:
        rms = math.sqrt(float(np.sum(grid.radius ** 2 * energy)) / total)
        if 4 * rms < 8 * grid.dx:
            raise ResolutionError(f"rescaled data spans {4 * rms / grid.dx:.1f} cells, fewer than 8")
    return out


def refined_rescale(a: VectorField, factor: int = 2) -> VectorField:
    """a_lam(x) = lam a(lam x) with lam = factor, on the same box with factor times the points per axis.

    The samples are the samples of a, so the rescaled data is resolved by as many cells as a.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"refinement factor must be a power of two, got {factor}")
    grid = a.grid
    N = grid.points_per_axis
    fine = GridSpec(grid.dim, factor * N, grid.box_length, grid.dealias_fraction)
    values = np.zeros((grid.dim,) + fine.shape)
    start = factor * N // 2 - N // 2
    values[(slice(None),) + (slice(start, start + N),) * grid.dim] = factor * a.physical().data
    return VectorField(fine, values, PHYSICAL)


def l2_time_bound(tr: Trajectory, a: VectorField, calibration: Optional[Calibration] = None) -> float:
    """Measured C in int ||u||_2^2 <= C J^{4/(n+1)} ||a||_2^{2(n-1)/(n+1)}."""
    n = a.grid.dim
    calibration = calibration or load_calibration(n)
    _, _, L = functionals(a, calibration)
    scale = L / calibration.gamma
    return float(tr.energy_integral[-1]) / scale if scale > 0 else 0.0


@dataclass
class SynthesisState:
    m: int = 0
    c_history: List[MomentMatrix] = field(default_factory=list)
    differences: List[float] = field(default_factory=list)
    y_differences: List[float] = field(default_factory=list)
    force: Optional[Forcing] = None
    trajectory: Optional[Trajectory] = None
    converged: bool = False
    t_cut: float = 0.0
    profile: Optional[ForceProfile] = None
    smallness: Optional[SmallnessReport] = None

    @property
    def ratios(self) -> List[float]:
        return [b / a for a, b in zip(self.differences, self.differences[1:]) if a > 0]

    @property
    def contracting(self) -> bool:
        return all(r <= OUTER_RATIO_LIMIT for r in self.ratios)

    @property
    def final(self) -> MomentMatrix:
        return self.c_history[-1]

    def beta(self) -> np.ndarray:
        return self.final.entries - self.force.integral()

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "converged": self.converged,
            "contracting": self.contracting,
            "t_cut": self.t_cut,
            "c_history": [c.to_dict() for c in self.c_history],
            "differences": self.differences,
            "ratios": self.ratios,
            "y_ratios": y_norm_ratios(self),
            "beta": self.beta().tolist() if self.force is not None else None,
            "profile": self.profile.to_dict() if self.profile is not None else None,
            "smallness": self.smallness.to_dict() if self.smallness is not None else None,
        }


def y_norm_ratios(state: SynthesisState) -> List[float]:
    """||u^(m+1) - u^(m)||_Y / ||u^(m) - u^(m-1)||_Y over the outer iterations."""
    d = state.y_differences
    return [b / a for a, b in zip(d, d[1:]) if a > 0]


def y_norm(tr: Trajectory) -> float:
    n = tr.grid.dim
    return float(np.max((1 + tr.times) ** ((n + 1) / 4.0) * tr.l2))


def _save_state(path: str, state: SynthesisState):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        cbor2.dump({"m": state.m, "t_cut": state.t_cut, "c_history": [c.to_dict() for c in state.c_history],
                    "differences": state.differences, "y_differences": state.y_differences}, f)
    os.replace(tmp, path)


def _load_state(path: str) -> Optional[SynthesisState]:
    if not os.path.exists(path):
        return None
    with open(path, "rb") as f:
        data = cbor2.load(f)
    return SynthesisState(m=data["m"], t_cut=data["t_cut"],
                          c_history=[MomentMatrix.from_dict(c) for c in data["c_history"]],
                          differences=list(data["differences"]), y_differences=list(data["y_differences"]))


def synthesize(a: VectorField, profile: ForceProfile, timegrid: TimeGrid, tol: float = 1e-6, max_outer: int = 25,
               picard: Optional[PicardConfig] = None, solver: str = "picard",
               horizon_tolerance: float = HORIZON_TOLERANCE, calibration: Optional[Calibration] = None,
               acknowledge_smallness: bool = False, checkpoint: Optional[str] = None,
               max_step: Optional[float] = None) -> SynthesisState:
    """Iterate solve, moment matrix, force until the relative change of c falls below tol."""
    grid = a.grid
    smallness = check_smallness(a, profile, calibration)
    if not smallness.passed:
        failing = [k for k, c in smallness.conditions.items() if not c.passed]
        if not acknowledge_smallness:
            raise SmallnessViolation(f"smallness conditions {failing} fail; pass acknowledge_smallness to proceed", [])
        logger.warning(f"proceeding with failing smallness conditions {failing}")

    def solve(force: Forcing) -> Trajectory:
        if solver == "picard":
            return picard_iterate(a, force, timegrid, picard)[0]
        if solver == "integrate":
            return integrate(a, force, timegrid, max_step=max_step)
        raise ValueError(f"unknown solver {solver!r}")

    state = _load_state(checkpoint) if checkpoint else None
    if state is not None and state.c_history:
        logger.info(f"resuming synthesis at m={state.m} from {checkpoint}")
        # u^(m) was driven by the force built from c^(m-1)
        force = build_force(state.c_history[-2], profile, grid) if len(state.c_history) > 1 else ZeroForcing(grid)
        previous = solve(force)
        state.force, state.trajectory = force, previous
    else:
        state = SynthesisState()
        force = ZeroForcing(grid)
        previous = solve(force)
        state.t_cut = choose_t_cut(previous, horizon_tolerance)
        state.c_history.append(moment_matrix(previous, state.t_cut, horizon_tolerance))
        logger.info(f"c^(0) trace {state.final.trace:.6g}, t_cut {state.t_cut:.4g}")
    state.profile = profile
    state.smallness = smallness

    while state.m < max_outer:
        state.m += 1
        force = build_force(state.final, profile, grid)
        tr = solve(force)
        c = moment_matrix(tr, state.t_cut, horizon_tolerance)
        scale = max(c.frobenius, state.final.frobenius)
        difference = float(np.linalg.norm(c.entries - state.final.entries)) / scale if scale > 0 else 0.0
        state.differences.append(difference)
        state.y_differences.append(y_norm(tr - previous))
        state.c_history.append(c)
        state.force, state.trajectory = force, tr
        previous = tr
        ratio = state.ratios[-1] if len(state.differences) > 1 and state.differences[-2] > 0 else float('nan')
        logger.info(f"outer iteration {state.m}: |dc|/|c| = {difference:.3e}, ratio {ratio:.3f}")
        if checkpoint:
            _save_state(checkpoint, state)
        if difference <= tol:
            state.converged = True
            break
        recent = state.ratios[-3:]
        if len(recent) == 3 and all(r >= 1 for r in recent):
            raise SynthesisDivergence(f"moment matrices diverge at m={state.m}, ratios {recent}", state.c_history)
    else:
        logger.warning(f"synthesis stopped after {max_outer} outer iterations at {state.differences[-1]:.3e}")
    return state


def unscale_trajectory(tr: Trajectory, lam: float) -> Trajectory:
    """u(x, t) = lam^-1 u_lam(x/lam, t/lam^2) on the box lam times larger."""
    grid = GridSpec(tr.grid.dim, tr.grid.points_per_axis, tr.grid.box_length * lam, tr.grid.dealias_fraction)
    return Trajectory(grid, tr.timegrid.scaled(lam ** 2), tr.spectra / lam)


def unscale_force(force: ProfileForcing, lam: float) -> ProfileForcing:
    return force.rescaled(lam)


def export_force(force: ProfileForcing, directory: str, compressed: bool = True) -> List[str]:
    """One tensor container per lattice time; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for j, t in enumerate(force.times):
        path = os.path.join(directory, f"force_{j:05d}.fld")
        write_field(path, force.tensor_field(float(t)), {"time": float(t)}, compressed=compressed, overwrite=True)
        paths.append(path)
    return paths
