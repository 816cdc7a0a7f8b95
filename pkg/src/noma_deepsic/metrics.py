"""Prediction metrics and evaluators for the estimation and mobility bounds.

Metrics act on real sequences; complex estimates are compared through
their stacked real and imaginary parts by the callers. The bound
evaluators transcribe the closed forms directly; the fitting routines
recover their constants from measured series.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np


class ConstantActual(ValueError):
    pass


class ZeroNaiveDenominator(ValueError):
    pass


class NonMonotoneSeries(UserWarning):
    pass


def _pair(predicted, actual, min_len: int = 1):
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} vs {a.size}")
    if a.size < min_len:
        raise ValueError(f"need at least {min_len} samples")
    return p, a


def mse(predicted, actual) -> float:
    p, a = _pair(predicted, actual)
    return float(np.mean((p - a) ** 2))


def nrmse(predicted, actual) -> float:
    """RMSE divided by the population standard deviation of ``actual``."""
    p, a = _pair(predicted, actual, 2)
    sigma = float(np.std(a))
    if sigma == 0.0:
        raise ConstantActual("actual series is constant")
    return math.sqrt(mse(p, a)) / sigma


def mase(predicted, actual) -> float:
    """``S * sum|e| / sum|a_i - a_{i-1}|`` with the leading sample count kept."""
    p, a = _pair(predicted, actual, 2)
    den = float(np.sum(np.abs(np.diff(a))))
    if den == 0.0:
        raise ZeroNaiveDenominator("naive one-step predictor is exact")
    return a.size * float(np.sum(np.abs(p - a))) / den


def mase_standard(predicted, actual) -> float:
    """Conventional MASE: mean absolute error over the mean naive error."""
    p, a = _pair(predicted, actual, 2)
    den = float(np.mean(np.abs(np.diff(a))))
    if den == 0.0:
        raise ZeroNaiveDenominator("naive one-step predictor is exact")
    return float(np.mean(np.abs(p - a))) / den


def r_squared(predicted, actual) -> float:
    p, a = _pair(predicted, actual, 2)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantActual("actual series is constant")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_tot


@dataclass(frozen=True)
class MetricReport:
    nrmse: float
    mase: float
    mse: float
    r2: float
    n_samples: int


def metric_report(predicted, actual) -> MetricReport:
    p, a = _pair(predicted, actual, 2)
    return MetricReport(nrmse(p, a), mase(p, a), mse(p, a), r_squared(p, a), int(a.size))


# ---------------------------------------------------------------------- estimation-error bound

@dataclass(frozen=True)
class BoundFit:
    c1: float
    gamma: float
    c2_term: float
    c3_term: float
    fit_r2: float
    c2: float = 0.0
    c3: float = 0.0
    floor: float = 0.0
    theorem3_c: float = float("nan")

    @property
    def transient_certified(self) -> bool:
        return self.fit_r2 >= 0.9

    def evaluate(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        return self.c1 * np.exp(-self.gamma * T) + self.c2_term + self.c3_term


def fit_theorem1_bound(T, mse_values, K: int, n_pilot: int, ber: float, llr_norm: float,
                       plateau_frac: float = 0.2, coverage: float = 0.95) -> BoundFit:
    """Fit ``C1 exp(-gamma T) + C2 K^3 / N_pilot + C3 BER / ||LLR||``.

    The floor is the mean of the last ``plateau_frac`` of the series;
    ``gamma`` and ``C1`` come from a line through ``log(mse - floor)`` over
    the points that stand clearly above it. The constant part is the
    smallest offset under which the curve dominates ``coverage`` of the
    points; it is split evenly between the pilot and decision-error terms
    (all to the pilot term when ``ber`` is zero).
    """
    T = np.asarray(T, dtype=float)
    y = np.asarray(mse_values, dtype=float)
    if T.size != y.size or T.size < 10:
        raise ValueError("need at least 10 (T, mse) points")
    if np.any(np.diff(y) > 0):
        warnings.warn("mse series is not non-increasing", NonMonotoneSeries, stacklevel=2)
    n_tail = max(3, int(round(plateau_frac * y.size)))
    floor = float(np.mean(y[-n_tail:]))
    excess = y - floor
    c1, gamma, r2 = 0.0, 0.0, 0.0
    top = float(excess.max())
    if top > 0:
        keep = excess > 0.05 * top
        if keep.sum() >= 3:
            slope, icpt = np.polyfit(T[keep], np.log(excess[keep]), 1)
            resid = np.log(excess[keep]) - (slope * T[keep] + icpt)
            ss = float(np.sum((np.log(excess[keep]) - np.log(excess[keep]).mean()) ** 2))
            r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 0.0
            if r2 >= 0.9 and slope < 0:
                c1, gamma = float(math.exp(icpt)), float(-slope)
    if gamma == 0.0:
        c1 = 0.0
    need = np.maximum(y - c1 * np.exp(-gamma * T), 0.0)
    offset = float(np.quantile(need, coverage, method="higher"))
    c3_term = 0.5 * offset if ber > 0 else 0.0
    c2_term = offset - c3_term
    c2 = c2_term * n_pilot / K ** 3
    c3 = c3_term * llr_norm / ber if ber > 0 else 0.0
    return BoundFit(c1, gamma, c2_term, c3_term, r2, c2, c3, floor)


def optimal_pilot_length(c2: float, K: int, overhead_per_pilot: float, grid) -> int:
    """Grid minimiser of ``C2 K^3 / N + overhead_per_pilot * N``."""
    grid = np.asarray(grid, dtype=float)
    cost = c2 * K ** 3 / grid + overhead_per_pilot * grid
    return int(grid[int(np.argmin(cost))])


def pilot_scaling_slope(c2: float, Ks=(2, 4, 8), overhead_ratio: float = 1e-4,
                        grid=np.arange(1, 20001)) -> float:
    """Log-log slope of the optimal pilot length against K.

    The per-pilot overhead is ``overhead_ratio * c2`` so the optimum sits
    well inside the integer grid whatever the fitted scale of ``c2``.
    """
    if c2 <= 0:
        raise ValueError("c2 must be positive")
    n = [optimal_pilot_length(c2, k, overhead_ratio * c2, grid) for k in Ks]
    return float(np.polyfit(np.log(Ks), np.log(n), 1)[0])


# ---------------------------------------------------------------------- closed forms

def theorem2_tracking_bound(L_coh: float, v: float, wavelength: float, dt: float, eta: float,
                            grad_pdd_norm: float) -> float:
    """``L (v / lambda * dt + eta * ||grad||)``."""
    if min(L_coh, wavelength, dt) <= 0 or min(v, eta, grad_pdd_norm) < 0:
        raise ValueError("L_coh, wavelength and dt must be positive; v, eta, grad norm non-negative")
    return L_coh * (v / wavelength * dt + eta * grad_pdd_norm)


def lemma1_ber_ratio(ber_baseline: float, ber_deepsic: float, gain_pdd_sq: float,
                     gain_base_sq: float, n0: float) -> tuple[float, float]:
    """Observed BER ratio and the exponential shape it should be proportional to."""
    for b in (ber_baseline, ber_deepsic):
        if not 0 < b <= 1:
            raise ValueError("BER values must lie in (0, 1]")
    if n0 <= 0:
        raise ValueError("n0 must be positive")
    return ber_baseline / ber_deepsic, math.exp((gain_pdd_sq - gain_base_sq) / n0)


@dataclass(frozen=True)
class Theorem3Result:
    c: float
    violations: tuple = ()   # (axis, i, j): NRMSE grew along T (axis 0) or S (axis 1)


def theorem3_nrmse_bound(nrmse_grid, T_values, S_values) -> Theorem3Result:
    """Smallest ``C`` with ``NRMSE <= C sqrt(1/T + 1/S)`` on every grid point."""
    g = np.asarray(nrmse_grid, dtype=float)
    T = np.asarray(T_values, dtype=float)
    S = np.asarray(S_values, dtype=float)
    if g.shape != (T.size, S.size) or min(g.shape) < 3:
        raise ValueError("grid must be at least 3x3 and match (len(T), len(S))")
    rate = np.sqrt(1.0 / T[:, None] + 1.0 / S[None, :])
    c = float(np.max(g / rate))
    viol = []
    for i, j in zip(*np.nonzero(np.diff(g, axis=0) > 0)):
        viol.append((0, int(i), int(j)))
    for i, j in zip(*np.nonzero(np.diff(g, axis=1) > 0)):
        viol.append((1, int(i), int(j)))
    return Theorem3Result(c, tuple(viol))


@dataclass(frozen=True)
class MobilityBoundCurve:
    delta: float
    length: float
    stiffness: float
    samples: list = field(default_factory=list)


def mobility_bound(omega, delta: float, length: float, stiffness: float):
    """``delta L k / (delta k + L omega^2)``."""
    omega = np.asarray(omega, dtype=float)
    return delta * length * stiffness / (delta * stiffness + length * omega ** 2)


def mobility_bound_curve(delta: float, length: float, stiffness: float, omega_grid) -> MobilityBoundCurve:
    if min(delta, length, stiffness) <= 0:
        raise ValueError("delta, L and k must be positive")
    w = np.asarray(omega_grid, dtype=float)
    m = mobility_bound(w, delta, length, stiffness)
    return MobilityBoundCurve(delta, length, stiffness, [(float(a), float(b)) for a, b in zip(w, m)])


# ---------------------------------------------------------------------- report

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def report_dict(metrics: MetricReport | None = None, **bounds) -> dict:
    """``{"metrics": ..., "bounds": ...}``; dataclass values are expanded."""
    out = {"metrics": asdict(metrics) if metrics is not None else {}, "bounds": {}}
    for k, v in bounds.items():
        out["bounds"][k] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
    return _clean(out)


def write_report(path, metrics: MetricReport | None = None, **bounds) -> None:
    with open(path, "w") as fh:
        json.dump(report_dict(metrics, **bounds), fh, indent=2, sort_keys=True)
        fh.write("\n")
