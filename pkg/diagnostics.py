""" Verification reports for trajectories and synthesized forces

    Whole-space limit statements cannot be observed on a periodic box.  Every time series here is
    restricted to the validity window sqrt(t) <= L/8 of the grid and limits are replaced by
    monotonicity over the last decade of valid nodes.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma

from force_synthesis import Calibration, MomentMatrix, functionals
from mild_solver import Forcing, Trajectory
from spectral_core import (F_norm_exponent, GridSpec, VectorField, heat_hat, kernel_F_hat, kernel_norm,
                           lp_norm, norms_and_moments)

logger = logging.getLogger(__name__)

WINDOW_NOTE = "fits and limits restricted to sqrt(t) <= L/8"
FIRST_MOMENT_TOLERANCE = 0.03
HIGHER_MOMENT_TOLERANCE = 0.05
MAX_MOMENT_ORDER = 4
VANISHING_MOMENT = 1e-6
RESCALE_AGREEMENT = 0.05


class WindowError(ValueError):
    """A fit window lies outside the validity window or spans less than a decade."""


@dataclass
class DecayReport:
    quantity: str
    window: Tuple[float, float]
    exponent: float
    intercept: float
    residual: float
    window_valid: bool
    points: int

    def to_dict(self) -> dict:
        return {"quantity": self.quantity, "window": list(self.window), "exponent": self.exponent,
                "intercept": self.intercept, "residual": self.residual, "window_valid": self.window_valid,
                "points": self.points, "note": WINDOW_NOTE}


def decay_slope(times: Sequence[float], values: Sequence[float], window: Tuple[float, float],
                grid: Optional[GridSpec] = None, quantity: str = "l2") -> DecayReport:
    """Least-squares slope of log(value) against log(t) over the window.

    With a grid the window must end inside the validity window.
    """
    t0, t1 = window
    if not 0 < t0 < t1:
        raise WindowError(f"bad fit window {window}")
    if t1 < 10 * t0 * (1 - 1e-12):
        raise WindowError(f"fit window {window} spans less than one decade")
    if grid is not None and t1 > grid.window_time * (1 + 1e-12):
        raise WindowError(f"fit window ends at t={t1:.4g}, beyond the validity window t <= {grid.window_time:.4g} "
                          f"(sqrt(t) <= L/8 with L={grid.box_length})")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = (times >= t0 * (1 - 1e-12)) & (times <= t1 * (1 + 1e-12))
    if np.count_nonzero(mask) < 3:
        raise WindowError(f"fewer than 3 samples in the fit window {window}")
    if np.any(values[mask] <= 0):
        raise ValueError("decay fits need positive values")
    x, y = np.log(times[mask]), np.log(values[mask])
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return DecayReport(quantity, (float(t0), float(t1)), float(slope), float(intercept), residual, True,
                       int(np.count_nonzero(mask)))


def last_decade(tr: Trajectory) -> Tuple[float, float]:
    """[t1/10, t1] with t1 the last node inside the validity window."""
    t1 = min(float(tr.times[-1]), tr.grid.window_time)
    return t1 / 10, t1


def trajectory_decay(tr: Trajectory, t0: Optional[float] = None, t1: Optional[float] = None) -> DecayReport:
    """Fit of ||u(t)||_2 over [t0, t1], by default the last decade of the validity window."""
    start, end = last_decade(tr)
    t1 = t1 if t1 is not None else end
    t0 = t0 if t0 is not None else start
    return decay_slope(tr.times, tr.l2, (t0, t1), tr.grid, "l2")


def leading_moment_order(a: VectorField, max_order: int = MAX_MOMENT_ORDER) -> int:
    """Lowest k with a nonvanishing moment int y^alpha a(y) dy, |alpha| = k; max_order + 1 when all vanish."""
    grid = a.grid
    values = a.physical().data
    magnitude = a.magnitude()
    for k in range(1, max_order + 1):
        scale = float(grid.integrate(grid.radius ** k * magnitude))
        for alpha in itertools.combinations_with_replacement(range(grid.dim), k):
            weight = np.ones(grid.shape)
            for axis in alpha:
                weight = weight * grid.mesh[axis]
            moment = max(abs(float(grid.integrate(weight * values[j]))) for j in range(grid.dim))
            if moment > VANISHING_MOMENT * scale:
                return k
    return max_order + 1


def heat_exponent(dim: int, order: int) -> float:
    """||e^{tD} a||_2 ~ t^{-(n/4 + k/2)} for a whose moments below order k vanish."""
    return -(dim / 4.0 + order / 2.0)


@dataclass
class HeatDecayReport:
    order: int
    expected: float
    tolerance: float
    heat: DecayReport
    runs: Dict[str, DecayReport]

    @property
    def passed(self) -> bool:
        checked = [self.heat] + ([self.runs["unforced"]] if self.order == 1 and "unforced" in self.runs else [])
        return all(abs(r.exponent - self.expected) <= self.tolerance for r in checked)

    def to_dict(self) -> dict:
        d = {name: r.to_dict() for name, r in self.runs.items()}
        d.update({"heat": self.heat.to_dict(), "moment_order": self.order, "expected": self.expected,
                  "tolerance": self.tolerance, "passed": self.passed})
        return d


def decay_check(a: VectorField, runs: Dict[str, Trajectory]) -> HeatDecayReport:
    """Fits of ||e^{tD} a||_2 and of each run over the last valid decade, against the heat exponent of a.

    The unforced run is held to the same exponent when a has first moments; a run whose data has
    vanishing first moments picks up the slower rate of its flux term and is only reported.
    """
    reference = next(iter(runs.values()))
    grid = a.grid
    window = last_decade(reference)
    a_hat = a.spectral().data
    heat = np.array([lp_norm(grid, np.sqrt(np.sum(grid.inverse(heat_hat(grid, a_hat, float(t))) ** 2, axis=0)), 2.0)
                     for t in reference.times])
    order = leading_moment_order(a)
    tolerance = FIRST_MOMENT_TOLERANCE if order == 1 else HIGHER_MOMENT_TOLERANCE
    report = HeatDecayReport(order, heat_exponent(grid.dim, order), tolerance,
                             decay_slope(reference.times, heat, window, grid, "heat_l2"),
                             {name: trajectory_decay(tr, *window) for name, tr in runs.items()})
    logger.info(f"heat decay {report.heat.exponent:.4f} over [{window[0]:.4g}, {window[1]:.4g}], expected "
                f"{report.expected:.4f} (moment order {order}): passed {report.passed}")
    return report


@dataclass
class MSReport:
    beta: np.ndarray
    scalar_part: float
    deviation: float
    diagonal_spread: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance * (1 + abs(float(np.trace(self.beta))))

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "scalar_part": self.scalar_part, "deviation": self.deviation,
                "diagonal_spread": self.diagonal_spread, "tolerance": self.tolerance, "passed": self.passed}


def ms_residual(c_inf: MomentMatrix, f_inf: Optional[Forcing], tolerance: float = 1e-5) -> MSReport:
    """beta = c - int int f and its distance from the scalar matrices."""
    c = c_inf.entries
    integral = np.zeros_like(c) if f_inf is None else f_inf.integral()
    beta = c - integral
    n = beta.shape[0]
    scalar = float(np.trace(beta)) / n
    deviation = float(np.linalg.norm(beta - scalar * np.eye(n)))
    diagonal = np.diag(beta)
    return MSReport(beta, scalar, deviation, float(np.max(diagonal) - np.min(diagonal)), tolerance)


@dataclass
class ProfileResidualReport:
    q: float
    times: np.ndarray
    residual: np.ndarray

    def decreasing_over_last_decade(self) -> bool:
        return _decreasing_over_last_decade(self.times, self.residual)

    def to_dict(self) -> dict:
        return {"q": self.q, "times": self.times.tolist(), "residual": self.residual.tolist(), "note": WINDOW_NOTE}


def _self_similar_exponent(n: int, q: float) -> float:
    return 0.5 + n / 2.0 * (1 - 1.0 / q)


def _last_decade(times: np.ndarray) -> np.ndarray:
    return times >= times[-1] / 10 * (1 - 1e-12)


def _decreasing_over_last_decade(times: np.ndarray, values: np.ndarray) -> bool:
    if len(times) < 2:
        return False
    tail = values[_last_decade(times)]
    return len(tail) >= 2 and bool(np.all(np.diff(tail) < 0))


def _valid_nodes(tr: Trajectory, nodes: Optional[Sequence[float]] = None) -> np.ndarray:
    if nodes is None:
        mask = tr.valid_mask() & (tr.times > 0)
        return np.flatnonzero(mask)
    indices = [tr.node_index(t) for t in nodes]
    for i in indices:
        if tr.times[i] > tr.grid.window_time * (1 + 1e-12) or tr.times[i] <= 0:
            raise WindowError(f"node t={tr.times[i]:.4g} lies outside the validity window")
    return np.array(indices, dtype=int)


def _moment_term_hat(grid: GridSpec, moments: np.ndarray, t: float) -> np.ndarray:
    """sum_k d_k E_t int y_k a_j dy for each j."""
    impulse = grid.kernel_hat(np.exp(-t * grid.k_squared))
    xi = grid.reduced_wavevector
    return np.stack([sum(1j * xi[k] * moments[k, j] for k in range(grid.dim)) * impulse for j in range(grid.dim)])


def _flux_term_hat(grid: GridSpec, beta: np.ndarray, t: float) -> np.ndarray:
    """sum_kl F_{lk,j}(t) beta_kl."""
    impulse = grid.kernel_hat(np.ones(grid.spectral_shape))
    return kernel_F_hat(grid, beta[(...,) + (None,) * grid.dim] * impulse, t)


def fm_profile_residual(tr: Trajectory, a: VectorField, f: Optional[Forcing], q: float = 2.0,
                        c: Optional[MomentMatrix] = None, nodes: Optional[Sequence[float]] = None) -> ProfileResidualReport:
    """t^{1/2 + n/2(1-1/q)} ||u(t) + sum d_k E_t M_kj + sum F (c - int int f)||_q at valid nodes.

    c is the flux matrix int int u_k u_l; without it the nonlinear term is left out, as for a
    linearised run.
    """
    grid = tr.grid
    moments = norms_and_moments(a).first_moments
    n = grid.dim
    beta = np.zeros((n, n))
    if c is not None:
        beta = beta + c.entries
    if f is not None:
        beta = beta - f.integral()
    indices = _valid_nodes(tr, nodes)
    weight_exponent = _self_similar_exponent(n, q)
    residual = []
    for i in indices:
        t = float(tr.times[i])
        total = tr.spectra[i] + _moment_term_hat(grid, moments, t)
        if np.any(beta):
            total = total + _flux_term_hat(grid, beta, t)
        values = grid.inverse(total)
        residual.append(t ** weight_exponent * lp_norm(grid, np.sqrt(np.sum(values ** 2, axis=0)), q))
    return ProfileResidualReport(q, tr.times[indices].copy(), np.array(residual))


def gradient_heat_kernel_norm(dim: int) -> float:
    """||grad E_1||_2 by radial quadrature."""
    sphere = 2 * math.pi ** (dim / 2) / gamma(dim / 2)

    def integrand(r):
        return (r / 2) ** 2 * (4 * math.pi) ** (-dim) * math.exp(-r ** 2 / 2) * r ** (dim - 1)

    value, _ = quad(integrand, 0, math.inf, epsabs=1e-14, epsrel=1e-12)
    return math.sqrt(sphere * value)


@dataclass
class HeatLemmaReport:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    gradient_norm: float

    @property
    def ratios(self) -> np.ndarray:
        return np.where(self.rhs > 0, self.lhs / np.where(self.rhs > 0, self.rhs, 1.0), 0.0)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1 + 1e-12)))

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "lhs": self.lhs.tolist(), "rhs": self.rhs.tolist(),
                "gradient_norm": self.gradient_norm, "max_ratio": float(np.max(self.ratios, initial=0.0)),
                "passed": self.passed, "note": WINDOW_NOTE}


def lemma_heat2_check(a: VectorField, nodes: Sequence[float]) -> HeatLemmaReport:
    """||e^{tD} a||_2 <= t^{-(n+2)/4} ||grad E_1||_2 int |y||a(y)| dy at each valid node."""
    grid = a.grid
    n = grid.dim
    times = np.array([t for t in nodes if 0 < t <= grid.window_time * (1 + 1e-12)], dtype=float)
    report = norms_and_moments(a)
    a_hat = a.spectral().data
    grad_norm = gradient_heat_kernel_norm(n)
    lhs = np.array([lp_norm(grid, np.sqrt(np.sum(grid.inverse(heat_hat(grid, a_hat, t)) ** 2, axis=0)), 2.0)
                    for t in times])
    rhs = times ** (-(n + 2) / 4.0) * grad_norm * report.weighted_first_moment
    return HeatLemmaReport(times, lhs, rhs, grad_norm)


@dataclass
class WiegnerReport:
    times: np.ndarray
    ratios: np.ndarray
    K: float
    c_emp: float
    rescaled_c_emp: Optional[float] = None

    @property
    def agreement(self) -> Optional[float]:
        """|C_emp(rescaled) / C_emp - 1|; None without a rescaled run."""
        if self.rescaled_c_emp is None:
            return None
        if self.c_emp == 0:
            return 0.0 if self.rescaled_c_emp == 0 else math.inf
        return abs(self.rescaled_c_emp / self.c_emp - 1)

    @property
    def passed(self) -> bool:
        agreement = self.agreement
        return bool(np.isfinite(self.c_emp) and agreement is not None and agreement <= RESCALE_AGREEMENT)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "ratios": self.ratios.tolist(), "K": self.K, "c_emp": self.c_emp,
                "rescaled_c_emp": self.rescaled_c_emp, "agreement": self.agreement, "passed": self.passed,
                "note": WINDOW_NOTE}


def _wiegner_ratios(tr: Trajectory, a: VectorField, calibration: Optional[Calibration],
                    indices: np.ndarray) -> Tuple[np.ndarray, float]:
    n = tr.grid.dim
    _, K, _ = functionals(a, calibration)
    a_norm = lp_norm(a.grid, a.magnitude(), 2.0)
    if a_norm == 0 or len(indices) == 0:
        return np.zeros(len(indices)), K
    bound = np.minimum(a_norm, K * tr.times[indices] ** (-(n + 2) / 4.0))
    return tr.l2[indices] / bound, K


def wiegner_check(tr: Trajectory, a: VectorField, calibration: Optional[Calibration] = None,
                  rescaled: Optional[Tuple[Trajectory, VectorField]] = None) -> WiegnerReport:
    """C_emp = max over valid nodes of ||u(t)||_2 / min(||a||_2, K(a) t^{-(n+2)/4}).

    C_emp does not change under u -> lam u(lam x, lam^2 t).  rescaled is the run of lam a(lam x) on the
    time grid scaled by lam^-2, compared at the nodes matching the valid nodes of tr; the check passes
    only when the two constants agree to RESCALE_AGREEMENT.
    """
    indices = _valid_nodes(tr)
    ratios, K = _wiegner_ratios(tr, a, calibration, indices)
    c_emp = float(np.max(ratios)) if len(ratios) else 0.0
    report = WiegnerReport(tr.times[indices].copy(), ratios, K, c_emp)
    if rescaled is not None:
        other, b = rescaled
        if len(other.times) != len(tr.times):
            raise ValueError(f"rescaled run has {len(other.times)} nodes, expected {len(tr.times)}")
        factor = tr.times[-1] / other.times[-1]
        if not np.allclose(other.times * factor, tr.times, rtol=1e-12, atol=0):
            raise ValueError("rescaled run is not on a uniformly scaled copy of the time grid")
        other_ratios, _ = _wiegner_ratios(other, b, calibration, indices)
        report.rescaled_c_emp = float(np.max(other_ratios)) if len(other_ratios) else 0.0
    logger.info(f"wiegner: C_emp {report.c_emp:.4g}, rescaled {report.rescaled_c_emp}")
    return report


@dataclass
class SeriesReport:
    name: str
    times: np.ndarray
    values: np.ndarray
    weighted: np.ndarray

    def to_dict(self) -> dict:
        return {"name": self.name, "times": self.times.tolist(), "values": self.values.tolist(),
                "weighted": self.weighted.tolist()}


def linear_deviation(tr: Trajectory, a: VectorField, q: float = 2.0) -> SeriesReport:
    """||u(t) - e^{tD}a||_q and its self-similar weighting at valid nodes."""
    grid = tr.grid
    a_hat = a.spectral().data
    indices = _valid_nodes(tr)
    values = []
    for i in indices:
        diff = grid.inverse(tr.spectra[i] - heat_hat(grid, a_hat, float(tr.times[i])))
        values.append(lp_norm(grid, np.sqrt(np.sum(diff ** 2, axis=0)), q))
    times = tr.times[indices].copy()
    values = np.array(values)
    return SeriesReport(f"linear_deviation_L{q:g}", times, values, times ** _self_similar_exponent(grid.dim, q) * values)


def l2_series(tr: Trajectory) -> SeriesReport:
    """||u(t)||_2 weighted by t^{(n+2)/4} at valid nodes."""
    indices = _valid_nodes(tr)
    times = tr.times[indices].copy()
    values = tr.l2[indices].copy()
    return SeriesReport("l2", times, values, times ** ((tr.grid.dim + 2) / 4.0) * values)


@dataclass
class FluxReport:
    times: np.ndarray
    flux: np.ndarray
    traceless_norm: np.ndarray

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "flux": self.flux.tolist(), "traceless_norm": self.traceless_norm.tolist()}


def flux_matrix_series(tr: Trajectory) -> FluxReport:
    n = tr.grid.dim
    flux = tr.flux_series
    traces = np.trace(flux, axis1=1, axis2=2)
    traceless = flux - traces[:, None, None] / n * np.eye(n)[None]
    return FluxReport(tr.times.copy(), flux.copy(), np.linalg.norm(traceless, axis=(1, 2)))


@dataclass
class RapidDissipationReport:
    forced: SeriesReport
    unforced: SeriesReport
    forced_deviation: SeriesReport
    unforced_deviation: SeriesReport
    forced_decreasing: bool
    unforced_plateau: bool
    final_ratio: float
    ratio_limit: float = 0.5

    @property
    def passed(self) -> bool:
        return self.forced_decreasing and self.unforced_plateau and self.final_ratio <= self.ratio_limit

    def to_dict(self) -> dict:
        return {"forced": self.forced.to_dict(), "unforced": self.unforced.to_dict(),
                "forced_deviation": self.forced_deviation.to_dict(),
                "unforced_deviation": self.unforced_deviation.to_dict(),
                "forced_decreasing": self.forced_decreasing, "unforced_plateau": self.unforced_plateau,
                "final_ratio": self.final_ratio, "passed": self.passed, "note": WINDOW_NOTE}


def _plateau(times: np.ndarray, values: np.ndarray, floor: float = 0.5) -> bool:
    tail = values[_last_decade(times)]
    return len(tail) >= 2 and tail[-1] > 0 and float(np.min(tail) / np.max(tail)) >= floor


def rapid_dissipation(forced: Trajectory, unforced: Trajectory, a: VectorField) -> RapidDissipationReport:
    """Compare t^{(n+2)/4}||u(t)||_2 for the forced and the matching unforced run over the last valid decade."""
    f2, u2 = l2_series(forced), l2_series(unforced)
    fd, ud = linear_deviation(forced, a), linear_deviation(unforced, a)
    final = float(f2.values[-1] / u2.values[-1]) if len(u2.values) and u2.values[-1] > 0 else math.inf
    report = RapidDissipationReport(f2, u2, fd, ud, _decreasing_over_last_decade(f2.times, f2.weighted),
                                    _plateau(u2.times, u2.weighted), final)
    logger.info(f"rapid dissipation: forced decreasing {report.forced_decreasing}, unforced plateau "
                f"{report.unforced_plateau}, final L2 ratio {final:.3f}")
    return report


def force_symmetry(force: Forcing) -> float:
    """||I - I^T||_F / ||I||_F for I = int int f; 0 for a zero force."""
    integral = force.integral()
    norm = float(np.linalg.norm(integral))
    return float(np.linalg.norm(integral - integral.T)) / norm if norm > 0 else 0.0


@dataclass
class KernelNormReport:
    times: np.ndarray
    norms: Dict[float, np.ndarray]
    exponents: Dict[float, float]
    expected: Dict[float, float]
    constants: Dict[float, float]
    weighted: bool = True

    def relative_errors(self) -> Dict[float, float]:
        return {p: abs(self.exponents[p] - self.expected[p]) / abs(self.expected[p]) for p in self.exponents}

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "weighted": self.weighted,
                "exponents": {repr(p): v for p, v in self.exponents.items()},
                "expected": {repr(p): v for p, v in self.expected.items()},
                "constants": {repr(p): v for p, v in self.constants.items()},
                "relative_errors": {repr(p): v for p, v in self.relative_errors().items()}}


def kernel_norm_exponents(grid: GridSpec, p_values: Sequence[float] = (1.0, 2.0),
                          times: Optional[Sequence[float]] = None, weighted: bool = True) -> KernelNormReport:
    """Measured time exponents of ||F(., t)||_p and the constants c_p = ||F(., t)||_p t^{-exponent}."""
    if times is None:
        times = np.geomspace(grid.min_window_time, grid.window_time, 9)
    times = np.asarray(times, dtype=float)
    if times[0] < grid.min_window_time * (1 - 1e-12) or times[-1] > grid.window_time * (1 + 1e-12):
        raise WindowError(f"kernel times [{times[0]:.4g}, {times[-1]:.4g}] leave the resolved window "
                          f"[{grid.min_window_time:.4g}, {grid.window_time:.4g}]")
    norms, exponents, expected, constants = {}, {}, {}, {}
    for p in p_values:
        series = np.array([kernel_norm(grid, float(t), p, weighted) for t in times])
        slope, _ = np.polyfit(np.log(times), np.log(series), 1)
        norms[p] = series
        exponents[p] = float(slope)
        expected[p] = F_norm_exponent(grid.dim, p)
        constants[p] = float(np.mean(series * times ** (-expected[p])))
        logger.debug(f"||F||_{p:g}: exponent {slope:.5f} against {expected[p]:.5f}")
    return KernelNormReport(times, norms, exponents, expected, constants, weighted)
