""" Mild solutions of the forced Navier-Stokes problem

    u(t) = e^{tD} a + int_0^t e^{(t-s)D} P div f(s) ds + G(u, u)(t)
    G(u, v)(t) = - int_0^t e^{(t-s)D} P div (u (x) v)(s) ds

    Two realisations of the same solution:

    picard_iterate  fixed point iteration of the Duhamel form over a whole time grid
    integrate       second order exponential time differencing marched node to node

    Both integrate the heat factor exactly.  Between quadrature points the integrand (P div f or
    P div u(x)u) is taken to be linear in time, and the exponential is integrated exactly against it,
    giving the weights h(phi1 - phi2) and h phi2 on the left and right values.  phi1 and phi2 are
    evaluated by the contour mean of Kassam and Trefethen.

    Trajectories keep their snapshots in spectral form, stacked as (nodes, n, spectral...).
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from fieldio import TrajectoryCheckpoint
from spectral_core import (GridSpec, ResolutionError, SPECTRAL, VectorField, divergence_hat, kernel_F_hat,
                           lp_norm, product_hat)

logger = logging.getLogger(__name__)

CONTOUR_POINTS = 32
DUHAMEL_TOLERANCE = 1e-8
MAX_DOUBLINGS = 8
GRADED_LEVELS = 4
BILINEAR_TOLERANCE = 1e-6
BILINEAR_DOUBLINGS = 5


class SmallnessViolation(RuntimeError):
    """The Picard iteration does not contract: the data is too large for the small-data theory."""

    def __init__(self, message: str, differences: Sequence[float]):
        super().__init__(message)
        self.differences = list(differences)
        self.ratios = [b / a if a > 0 else math.inf for a, b in zip(self.differences, self.differences[1:])]


def norm_exponents(dim: int) -> Tuple[float, ...]:
    return tuple(sorted({1.0, 2.0, float(dim), 2.0 * dim, 3.0 * dim})) + (math.inf,)


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    steps: int = 0
    spacing: str = "uniform"
    ratio: float = 1.2
    t_min: float = 1e-3

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.spacing == "uniform":
            if self.steps < 1:
                raise ValueError(f"uniform grids need steps >= 1, got {self.steps}")
        elif self.spacing == "geometric":
            if not 0 < self.t_min < self.t_end:
                raise ValueError(f"geometric grids need 0 < t_min < t_end, got t_min={self.t_min}")
            if not self.ratio > 1:
                raise ValueError(f"geometric ratio must exceed 1, got {self.ratio}")
            if self.steps == 1:
                raise ValueError("geometric grids need at least 2 steps")
            if self.steps < 1:
                count = math.ceil(math.log(self.t_end / self.t_min) / math.log(self.ratio) - 1e-9)
                object.__setattr__(self, "steps", max(1, count) + 1)
        else:
            raise ValueError(f"unknown spacing {self.spacing!r}")

    @classmethod
    def uniform(cls, t_end: float, steps: int) -> "TimeGrid":
        return cls(t_end, steps, "uniform")

    @classmethod
    def geometric(cls, t_end: float, t_min: float = 1e-3, ratio: float = 1.2) -> "TimeGrid":
        return cls(t_end, 0, "geometric", ratio, t_min)

    @cached_property
    def nodes(self) -> np.ndarray:
        if self.spacing == "uniform":
            nodes = np.linspace(0.0, self.t_end, self.steps + 1)
        else:
            k = self.steps - 1
            nodes = np.concatenate([[0.0], self.t_min * (self.t_end / self.t_min) ** (np.arange(k + 1) / k)])
            nodes[-1] = self.t_end
        nodes.flags.writeable = False
        return nodes

    def scaled(self, factor: float) -> "TimeGrid":
        """Same grid with every node multiplied by factor."""
        return TimeGrid(self.t_end * factor, self.steps, self.spacing, self.ratio, self.t_min * factor)

    def to_dict(self) -> dict:
        return {"t_end": self.t_end, "steps": self.steps, "spacing": self.spacing,
                "ratio": self.ratio, "t_min": self.t_min}


@dataclass(frozen=True)
class PicardConfig:
    max_iterations: int = 50
    convergence_norm: str = "X_2n"
    tolerance: float = 1e-10

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.convergence_norm != "X_2n":
            raise ValueError(f"unsupported convergence norm {self.convergence_norm!r}")


class Trajectory:
    """Velocity snapshots on a time grid with their norm series.

    Snapshots are immutable; norms, the instantaneous flux matrices int u_k u_l dx and the running
    energy integral are computed once on construction.
    """

    def __init__(self, grid: GridSpec, timegrid: TimeGrid, spectra: np.ndarray):
        expected = (len(timegrid.nodes), grid.dim) + grid.spectral_shape
        spectra = np.asarray(spectra, dtype=np.complex128)
        if spectra.shape != expected:
            raise ValueError(f"trajectory spectra have shape {spectra.shape}, expected {expected}")
        spectra.flags.writeable = False
        self.grid = grid
        self.timegrid = timegrid
        self.spectra = spectra
        self.exponents = norm_exponents(grid.dim)
        self.norm_series: Dict[float, np.ndarray] = {p: np.zeros(len(self.times)) for p in self.exponents}
        self.flux_series = np.zeros((len(self.times), grid.dim, grid.dim))
        for i in range(len(self.times)):
            values = grid.inverse(spectra[i])
            magnitude = np.sqrt(np.sum(values ** 2, axis=0))
            for p in self.exponents:
                self.norm_series[p][i] = lp_norm(grid, magnitude, p)
            flat = values.reshape(grid.dim, -1)
            self.flux_series[i] = flat @ flat.T * grid.cell_volume
        for series in self.norm_series.values():
            series.flags.writeable = False
        self.energy_integral = cumulative_trapezoid(self.l2 ** 2, self.times, initial=0.0)

    @classmethod
    def zeros(cls, grid: GridSpec, timegrid: TimeGrid) -> "Trajectory":
        return cls(grid, timegrid, np.zeros((len(timegrid.nodes), grid.dim) + grid.spectral_shape, dtype=np.complex128))

    @property
    def times(self) -> np.ndarray:
        return self.timegrid.nodes

    @property
    def l2(self) -> np.ndarray:
        return self.norm_series[2.0]

    def __len__(self):
        return len(self.times)

    def snapshot(self, index: int) -> VectorField:
        return VectorField(self.grid, self.spectra[index], SPECTRAL)

    @property
    def snapshots(self) -> List[VectorField]:
        return [self.snapshot(i) for i in range(len(self))]

    def node_index(self, t: float) -> int:
        matches = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=0.0))
        if len(matches) == 0:
            raise ValueError(f"t={t} is not a node of the time grid")
        return int(matches[0])

    def valid_mask(self) -> np.ndarray:
        """Nodes inside the whole-space validity window sqrt(t) <= L/8."""
        return self.times <= self.grid.window_time * (1 + 1e-12)

    def max_divergence(self) -> float:
        worst = 0.0
        for i in range(len(self)):
            div = self.grid.inverse(divergence_hat(self.grid, self.spectra[i]))
            scale = self.norm_series[math.inf][i] * self.grid.k_max
            if scale > 0:
                worst = max(worst, float(np.max(np.abs(div))) / scale)
        return worst

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        _check_same(self, other)
        return Trajectory(self.grid, self.timegrid, self.spectra - other.spectra)


def _check_same(u: Trajectory, v: Trajectory):
    if u.grid != v.grid:
        raise ValueError("trajectories live on different grids")
    if u.timegrid != v.timegrid:
        raise ValueError("trajectories live on different time grids")


@dataclass
class KatoNormReport:
    x_p_norms: Dict[float, float]
    y_norm: float
    energy_integral: float
    tail_estimate: float
    energy_bound_ratio: float = 0.0

    def to_dict(self) -> dict:
        return {
            "x_p_norms": {repr(p): v for p, v in sorted(self.x_p_norms.items())},
            "y_norm": self.y_norm,
            "energy_integral": self.energy_integral,
            "tail_estimate": self.tail_estimate,
            "energy_bound_ratio": self.energy_bound_ratio,
        }


class Forcing:
    """ A tensor forcing f(x, t) with compact support in time.

        Subclasses provide tensor_hat(t).  A forcing that is a fixed spectral direction times a scalar
        spectral profile may override factorized() so the Duhamel integral is taken on the scalar
        profile once.  Times in breakpoints are kept as quadrature points; between them the forcing
        is expected to be smooth in time.
    """

    breakpoints: Tuple[float, ...] = ()

    def __init__(self, grid: GridSpec, support: Tuple[float, float]):
        if not 0 <= support[0] <= support[1]:
            raise ValueError(f"bad time support {support}")
        self.grid = grid
        self.support = (float(support[0]), float(support[1]))

    @property
    def is_zero(self) -> bool:
        return False

    def tensor_hat(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def driving_hat(self, t: float) -> np.ndarray:
        """P div f(t) in spectral form."""
        return kernel_F_hat(self.grid, self.tensor_hat(t), 0.0)

    def factorized(self) -> Optional[Tuple[np.ndarray, Callable[[float], np.ndarray]]]:
        return None

    def integral(self) -> np.ndarray:
        """int int f_kl dx dt."""
        raise NotImplementedError

    def check_resolution(self):
        pass


class ZeroForcing(Forcing):
    def __init__(self, grid: GridSpec):
        super().__init__(grid, (0.0, 0.0))

    @property
    def is_zero(self) -> bool:
        return True

    def tensor_hat(self, t: float) -> np.ndarray:
        return np.zeros((self.grid.dim, self.grid.dim) + self.grid.spectral_shape, dtype=np.complex128)

    def integral(self) -> np.ndarray:
        return np.zeros((self.grid.dim, self.grid.dim))


class SeparableForcing(Forcing):
    """f(x, t) = g(x) tau(t) for a fixed physical tensor g and scalar time factor tau on [0, T]."""

    def __init__(self, grid: GridSpec, tensor: np.ndarray, time_factor: Callable[[float], float],
                 duration: float, time_integral: Optional[float] = None):
        super().__init__(grid, (0.0, duration))
        self.tensor = np.asarray(tensor, dtype=float)
        self.tensor_spectrum = grid.forward(self.tensor)
        self.time_factor = time_factor
        self.time_integral = time_integral

    def tensor_hat(self, t: float) -> np.ndarray:
        if not self.support[0] <= t <= self.support[1]:
            return np.zeros_like(self.tensor_spectrum)
        return self.tensor_spectrum * self.time_factor(t)

    def integral(self) -> np.ndarray:
        if self.time_integral is None:
            raise ValueError("time integral of the forcing is not known")
        return self.grid.integrate(self.tensor) * self.time_integral


@lru_cache(maxsize=1024)
def etd_weights(grid: GridSpec, h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(e^{-h|k|^2}, h(phi1 - phi2), h phi2) for one step of length h.

    Multiplying the left and right values of a linearly interpolated integrand by the last two and
    summing integrates the heat factor against it exactly.
    """
    L = -h * grid.k_squared.ravel()
    r = np.exp(1j * np.pi * (np.arange(1, CONTOUR_POINTS + 1) - .5) / CONTOUR_POINTS)
    LR = L[:, None] + r[None, :]
    phi1 = np.mean((np.exp(LR) - 1) / LR, axis=1).real
    phi2 = np.mean((np.exp(LR) - 1 - LR) / LR ** 2, axis=1).real
    shape = grid.spectral_shape
    E = np.exp(L).reshape(shape)
    left = (h * (phi1 - phi2)).reshape(shape)
    right = (h * phi2).reshape(shape)
    for array in (E, left, right):
        array.flags.writeable = False
    return E, left, right


def _heat_series(grid: GridSpec, nodes: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    return np.stack([a_hat * np.exp(-t * grid.k_squared) for t in nodes])


def _substep_points(a: float, b: float, h: float, breakpoints: Sequence[float] = (),
                    levels: int = GRADED_LEVELS) -> np.ndarray:
    """Uniform points of spacing <= h on [a, b] plus the breakpoints inside, the last cell refined
    geometrically toward b."""
    m = max(1, math.ceil((b - a) / h - 1e-9))
    points = np.linspace(a, b, m + 1)
    inner = [s for s in breakpoints if a < s < b]
    if inner:
        points = np.union1d(points, inner)
    last = points[-2]
    graded = b - (b - last) / 2.0 ** np.arange(1, levels + 1)
    return np.concatenate([points[:-1], graded, [b]])


def _duhamel_pass(grid: GridSpec, nodes: np.ndarray, g: Callable[[float], np.ndarray],
                  support: Tuple[float, float], h: float, breakpoints: Sequence[float] = ()) -> np.ndarray:
    s0, s1 = support
    sample = g(s0)
    out = np.zeros((len(nodes),) + sample.shape, dtype=np.complex128)
    acc = np.zeros(sample.shape, dtype=np.complex128)
    for i in range(1, len(nodes)):
        t_prev, t = nodes[i - 1], nodes[i]
        a, b = max(t_prev, s0), min(t, s1)
        if a < b:
            acc = acc * np.exp(-(a - t_prev) * grid.k_squared)
            points = _substep_points(a, b, h, breakpoints)
            g_left = g(points[0])
            for p, q in zip(points[:-1], points[1:]):
                g_right = g(q)
                E, left, right = etd_weights(grid, float(q - p))
                acc = E * acc + left * g_left + right * g_right
                g_left = g_right
            acc = acc * np.exp(-(t - b) * grid.k_squared)
        else:
            acc = acc * np.exp(-(t - t_prev) * grid.k_squared)
        out[i] = acc
    return out


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    scale = np.max(np.abs(new))
    if scale == 0:
        return float(np.max(np.abs(old)))
    return float(np.max(np.abs(new - old)) / scale)


def duhamel_series(forcing: Forcing, timegrid: TimeGrid, substep: Optional[float] = None,
                   tolerance: float = DUHAMEL_TOLERANCE) -> np.ndarray:
    """int_0^t e^{(t-s)D} P div f(s) ds at every node, stacked spectra (nodes, n, spectral...)."""
    grid = forcing.grid
    nodes = timegrid.nodes
    shape = (len(nodes), grid.dim) + grid.spectral_shape
    if forcing.is_zero:
        return np.zeros(shape, dtype=np.complex128)
    s0, s1 = forcing.support
    if s1 > nodes[-1] * (1 + 1e-12):
        raise ValueError(f"forcing support ends at {s1}, after t_end={nodes[-1]}")
    duration = s1 - s0
    h = substep if substep is not None else duration / 16
    if duration <= 0 or duration / h < 4:
        raise ResolutionError(f"forcing support of duration {duration} spans fewer than 4 substeps of {h}")
    forcing.check_resolution()

    factorized = forcing.factorized()
    if factorized is not None:
        direction, scalar = factorized
        cache: Dict[float, np.ndarray] = {}
    else:
        direction, scalar = None, None
        cache = {}

    def g(s: float) -> np.ndarray:
        if s not in cache:
            cache[s] = scalar(s) if scalar is not None else forcing.driving_hat(s)
        return cache[s]

    result = _duhamel_pass(grid, nodes, g, forcing.support, h, forcing.breakpoints)
    for doubling in range(MAX_DOUBLINGS):
        h /= 2
        refined = _duhamel_pass(grid, nodes, g, forcing.support, h, forcing.breakpoints)
        change = _relative_change(refined, result)
        result = refined
        logger.debug(f"duhamel substep {h:.3e}: relative change {change:.3e}")
        if change < tolerance:
            break
    else:
        logger.warning(f"duhamel quadrature did not settle below {tolerance:.0e} (last change {change:.3e})")

    if direction is not None:
        return result[:, None] * direction[None]
    return result


def duhamel_force(forcing: Forcing, timegrid: TimeGrid, substep: Optional[float] = None) -> Trajectory:
    return Trajectory(forcing.grid, timegrid, duhamel_series(forcing, timegrid, substep))


def _between(grid: GridSpec, nodes: np.ndarray, U: np.ndarray, i: int, theta: Fraction) -> np.ndarray:
    """u at t_{i-1} + theta h: heat flow from the left node plus theta times what it misses at the right one."""
    if theta == 0:
        return U[i - 1]
    if theta == 1:
        return U[i]
    h = float(nodes[i] - nodes[i - 1])
    k2 = grid.k_squared
    return np.exp(-float(theta) * h * k2) * U[i - 1] + float(theta) * (U[i] - np.exp(-h * k2) * U[i - 1])


def _interval_integral(grid: GridSpec, h: float, g: Callable[[Fraction], np.ndarray], m: int) -> np.ndarray:
    """int_0^h e^{(h-s)D} g(s) ds over m equal substeps, g linear on each."""
    E, left, right = etd_weights(grid, h / m)
    g_left = g(Fraction(0))
    acc = np.zeros(g_left.shape, dtype=np.complex128)
    for j in range(1, m + 1):
        g_right = g(Fraction(j, m))
        acc = E * acc + left * g_left + right * g_right
        g_left = g_right
    return acc


def _bilinear_pass(grid: GridSpec, nodes: np.ndarray, U: np.ndarray, V: np.ndarray,
                   substeps: Optional[Sequence[int]], tolerance: float) -> Tuple[np.ndarray, List[int]]:
    same = U is V
    out = np.zeros(U.shape, dtype=np.complex128)
    acc = np.zeros(U.shape[1:], dtype=np.complex128)
    counts: List[int] = []
    g_node = kernel_F_hat(grid, product_hat(grid, U[0], U[0] if same else V[0]), 0.0)
    for i in range(1, len(nodes)):
        h = float(nodes[i] - nodes[i - 1])
        cache = {Fraction(0): g_node}

        def g(theta: Fraction, i=i, cache=cache) -> np.ndarray:
            if theta not in cache:
                u = _between(grid, nodes, U, i, theta)
                v = u if same else _between(grid, nodes, V, i, theta)
                cache[theta] = kernel_F_hat(grid, product_hat(grid, u, v), 0.0)
            return cache[theta]

        if substeps is not None:
            m = substeps[i - 1]
            part = _interval_integral(grid, h, g, m)
        else:
            m = 1
            part = _interval_integral(grid, h, g, m)
            for _ in range(BILINEAR_DOUBLINGS):
                refined = _interval_integral(grid, h, g, 2 * m)
                change = _relative_change(refined, part)
                m, part = 2 * m, refined
                if change < tolerance:
                    break
        counts.append(m)
        acc = np.exp(-h * grid.k_squared) * acc + part
        out[i] = -acc
        g_node = g(Fraction(1))
    return out, counts


def bilinear_substeps(grid: GridSpec, nodes: np.ndarray, U: np.ndarray, V: np.ndarray,
                      tolerance: float = BILINEAR_TOLERANCE) -> List[int]:
    """Substeps per node interval at which doubling changes G(u, v) by less than tolerance."""
    return _bilinear_pass(grid, nodes, U, V, None, tolerance)[1]


def bilinear_series(grid: GridSpec, nodes: np.ndarray, U: np.ndarray, V: np.ndarray,
                    substeps: Optional[Sequence[int]] = None, tolerance: float = BILINEAR_TOLERANCE) -> np.ndarray:
    """G(u, v) at every node from stacked spectra of u and v on the same nodes.

    Between nodes u and v follow the heat flow of the left node, corrected linearly toward the right
    one.  Each interval is halved until the result settles, unless substeps fixes the counts.
    """
    return _bilinear_pass(grid, nodes, U, V, substeps, tolerance)[0]


def bilinear_G(u: Trajectory, v: Trajectory, t: float) -> VectorField:
    _check_same(u, v)
    index = u.node_index(t)
    nodes = u.times[:index + 1]
    series = bilinear_series(u.grid, nodes, u.spectra[:index + 1], v.spectra[:index + 1])
    return VectorField(u.grid, series[-1], SPECTRAL)


def _weighted_sup(grid: GridSpec, nodes: np.ndarray, spectra: np.ndarray, p: float) -> float:
    """sup over nodes of t^{1/2 - n/(2p)} ||u(t)||_p."""
    weight_exponent = 0.5 - grid.dim / (2.0 * p)
    best = 0.0
    for t, spectrum in zip(nodes, spectra):
        if t == 0 and weight_exponent > 0:
            continue
        values = grid.inverse(spectrum)
        value = lp_norm(grid, np.sqrt(np.sum(values ** 2, axis=0)), p)
        best = max(best, t ** weight_exponent * value)
    return best


def picard_iterate(a: VectorField, forcing: Optional[Forcing], timegrid: TimeGrid,
                   cfg: Optional[PicardConfig] = None, substep: Optional[float] = None) -> Tuple[Trajectory, List[float]]:
    """Fixed point of u = e^{tD}a + duhamel_force + G(u, u) on the time grid.

    Returns the trajectory and the history of X_2n distances between successive iterates.  Raises
    SmallnessViolation when the iterates stop contracting.
    """
    cfg = cfg or PicardConfig()
    grid = a.grid
    forcing = forcing or ZeroForcing(grid)
    nodes = timegrid.nodes
    p = 2.0 * grid.dim

    U0 = _heat_series(grid, nodes, a.spectral().data)
    if not forcing.is_zero:
        U0 = U0 + duhamel_series(forcing, timegrid, substep)
    scale = _weighted_sup(grid, nodes, U0, p)
    if scale == 0:
        return Trajectory(grid, timegrid, U0), [0.0]

    # substeps fixed once so every iterate applies the same discrete map
    substeps = bilinear_substeps(grid, nodes, U0, U0)
    U = U0
    history: List[float] = []
    for iteration in range(cfg.max_iterations):
        with np.errstate(over='ignore', invalid='ignore'):
            U_next = U0 + bilinear_series(grid, nodes, U, U, substeps)
            difference = _weighted_sup(grid, nodes, U_next - U, p)
        history.append(difference)
        U = U_next
        if len(history) > 1:
            logger.debug(f"picard iteration {iteration}: difference {difference:.3e}, ratio {history[-1] / history[-2]:.3f}")
        if not np.isfinite(difference):
            raise SmallnessViolation(f"picard iterates overflowed after {iteration + 1} iterations", history)
        if difference <= cfg.tolerance * scale:
            break
        if len(history) >= 4 and all(history[-k] >= history[-k - 1] for k in range(1, 4)):
            raise SmallnessViolation(f"picard differences grew for 3 consecutive iterations "
                                     f"(last {difference:.3e}); data too large", history)
    else:
        raise SmallnessViolation(f"picard iteration did not contract within {cfg.max_iterations} iterations "
                                 f"(last difference {history[-1]:.3e})", history)

    logger.info(f"picard converged in {len(history)} iterations, ratios "
                f"{[round(b / a, 4) for a, b in zip(history, history[1:]) if a > 0]}")
    return Trajectory(grid, timegrid, U), history


def contraction_ratios(history: Sequence[float]) -> List[float]:
    return [b / a for a, b in zip(history, history[1:]) if a > 0]


def _nonlinear_hat(grid: GridSpec, u_hat: np.ndarray) -> Tuple[np.ndarray, float]:
    """(-P div(u (x) u), max|u|)."""
    up = grid.inverse(u_hat * grid.dealias_mask)
    n = grid.dim
    prod = np.empty((n, n) + grid.spectral_shape, dtype=np.complex128)
    for j in range(n):
        for k in range(j, n):
            prod[j, k] = grid.forward(up[j] * up[k]) * grid.dealias_mask
            prod[k, j] = prod[j, k]
    max_u = float(np.max(np.sqrt(np.sum(up ** 2, axis=0))))
    return -kernel_F_hat(grid, prod, 0.0), max_u


def _step_points(t0: float, t1: float, support: Tuple[float, float], max_step: Optional[float],
                 support_step: float, breakpoints: Sequence[float] = ()) -> np.ndarray:
    breaks = [t0, t1] + [s for s in tuple(support) + tuple(breakpoints) if t0 < s < t1]
    breaks = sorted(set(breaks))
    points = [t0]
    for a, b in zip(breaks[:-1], breaks[1:]):
        limit = max_step
        if support[0] <= a and b <= support[1] and support[1] > support[0]:
            limit = support_step if limit is None else min(limit, support_step)
        m = 1 if limit is None else max(1, math.ceil((b - a) / limit - 1e-9))
        points.extend(np.linspace(a, b, m + 1)[1:])
    return np.array(points)


def integrate(a: VectorField, forcing: Optional[Forcing], timegrid: TimeGrid, nonlinear: bool = True,
              max_step: Optional[float] = None, checkpoint: Optional[str] = None) -> Trajectory:
    """March the mild formulation with the second order ETD scheme of Cox and Matthews.

        a  = e^{hL} u + h phi1 N(u, t)
        u' = a + h phi2 (N(a, t + h) - N(u, t))

    with N(u, t) = P div f(t) - P div(u (x) u).  Steps are split at the forcing support boundaries,
    inside the support they are at most 1/16 of its duration, and everywhere at most max_step.
    """
    grid = a.grid
    forcing = forcing or ZeroForcing(grid)
    if not forcing.is_zero:
        forcing.check_resolution()
    nodes = timegrid.nodes
    duration = forcing.support[1] - forcing.support[0]
    support_step = duration / 16 if duration > 0 else math.inf

    def N(u_hat: np.ndarray, t: float, h: float) -> np.ndarray:
        out = np.zeros_like(u_hat)
        if not forcing.is_zero and forcing.support[0] <= t <= forcing.support[1]:
            out = out + forcing.driving_hat(t)
        if nonlinear:
            term, max_u = _nonlinear_hat(grid, u_hat)
            if h * max_u * grid.k_max > 1.0:
                raise ResolutionError(f"step {h:.3e} with max|u|={max_u:.3e} violates h max|u| k_max <= 1 at t={t:.4g}")
            out = out + term
        return out

    spectra = np.zeros((len(nodes), grid.dim) + grid.spectral_shape, dtype=np.complex128)
    spectra[0] = a.spectral().data
    start = 0
    ckpt = None
    if checkpoint is not None:
        ckpt = TrajectoryCheckpoint(checkpoint, grid)
        stored = ckpt.load()
        for i, (t, snapshot) in enumerate(stored):
            if i >= len(nodes) or not np.isclose(t, nodes[i], rtol=1e-12, atol=0.0):
                raise ValueError(f"checkpoint {checkpoint} does not match the time grid at node {i}")
            spectra[i] = snapshot.spectral().data
        if stored:
            start = len(stored) - 1
        else:
            ckpt.append(float(nodes[0]), VectorField(grid, spectra[0], SPECTRAL))

    u = spectra[start]
    for i in range(start, len(nodes) - 1):
        points = _step_points(nodes[i], nodes[i + 1], forcing.support, max_step, support_step,
                              forcing.breakpoints)
        for t, t_next in zip(points[:-1], points[1:]):
            h = float(t_next - t)
            E, left, right = etd_weights(grid, h)
            Nu = N(u, t, h)
            stage = E * u + (left + right) * Nu
            u = stage + right * (N(stage, t_next, h) - Nu)
        if not np.all(np.isfinite(u)):
            raise ResolutionError(f"integration produced non-finite values by t={nodes[i + 1]:.4g}")
        spectra[i + 1] = u
        if ckpt is not None:
            ckpt.append(float(nodes[i + 1]), VectorField(grid, u, SPECTRAL))

    return Trajectory(grid, timegrid, spectra)


def envelope_tail(tr: Trajectory, t_cut: float) -> Tuple[float, float]:
    """(K_emp, tail bound) for int_{t_cut}^inf ||u||_2^2 from ||u(t)||_2 <= K_emp t^{-(n+2)/4}.

    K_emp is the largest ||u(t)||_2 t^{(n+2)/4} over nodes in [t_cut/4, t_cut].
    """
    n = tr.grid.dim
    times = tr.times
    late = (times >= t_cut / 4) & (times <= t_cut * (1 + 1e-12)) & (times > 0)
    if not np.any(late):
        raise ValueError(f"no nodes in [{t_cut / 4}, {t_cut}] to fit the decay envelope")
    K = float(np.max(tr.l2[late] * times[late] ** ((n + 2) / 4.0)))
    return K, (2.0 / n) * K ** 2 * t_cut ** (-n / 2.0)


def kato_norms(tr: Trajectory, a: Optional[VectorField] = None) -> KatoNormReport:
    n = tr.grid.dim
    times = tr.times
    x_p = {}
    for p, series in tr.norm_series.items():
        if p < n:
            continue
        exponent = 0.5 - n / (2.0 * p)
        weights = np.where(times > 0, times, 0.0) ** exponent if exponent > 0 else np.ones_like(times)
        x_p[p] = float(np.max(weights * series))
    y_norm = float(np.max((1 + times) ** ((n + 1) / 4.0) * tr.l2))
    if y_norm == 0:
        tail = 0.0
    else:
        _, tail = envelope_tail(tr, float(times[-1]))
    report = KatoNormReport(x_p, y_norm, float(tr.energy_integral[-1]), tail)
    if a is not None:
        report.energy_bound_ratio = energy_bound_check(tr, a)
    return report


def energy_bound_check(tr: Trajectory, a: VectorField) -> float:
    """sup_t ||u(t)||_2 / (2 ||a||_2); at most 1 in the small-data regime, 0 for zero data."""
    a_norm = lp_norm(a.grid, a.magnitude(), 2.0)
    peak = float(np.max(tr.l2))
    if a_norm == 0:
        return 0.0 if peak == 0 else math.inf
    return peak / (2 * a_norm)


def measure_bilinear_constant(tr: Trajectory) -> float:
    """kappa_emp = sup_t ||G(u,u)(t)||_n / ||u||_{X_2n}^2."""
    grid = tr.grid
    n = grid.dim
    G = bilinear_series(grid, tr.times, tr.spectra, tr.spectra)
    numerator = _weighted_sup(grid, tr.times, G, float(n))
    denominator = _weighted_sup(grid, tr.times, tr.spectra, 2.0 * n) ** 2
    return numerator / denominator if denominator > 0 else 0.0
