"""Temporally correlated Rayleigh fading traces and the observables derived from them.

Each user's M-antenna channel starts from ``CN(0, PL_k I_M)`` and evolves as
a first-order Gauss-Markov process whose one-step correlation is the Jakes
value ``J0(2 pi f_D dt)``. SNR, RSRQ and CQI are deterministic functions of
the effective gain ``|h^H w|^2``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, bessel_j0, draw_complex_gaussian

SNR_RANGE_DB = (-9.0, 14.0)
RSRQ_RANGE_DB = (-20.0, -8.0)
CQI_LEVELS = 16


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    num_antennas: int = 4
    num_users: int = 4
    time_steps: int = 1000
    step_duration: float = 1e-3  # s
    velocity_kmh: float = 60.0
    carrier_wavelength: float = 0.15  # m, 2 GHz
    distance_near: float = 20.0  # m
    distance_far: float = 50.0  # m
    pathloss_exponent: float = 3.0
    noise_variance: float = 2e-5  # linear, relative to unit transmit power
    total_power: float = 1.0

    @property
    def velocity(self) -> float:
        """UE speed in m/s."""
        return self.velocity_kmh / 3.6

    @property
    def doppler_step(self) -> float:
        """Normalised Doppler per step, ``v / lambda * dt``."""
        return self.velocity / self.carrier_wavelength * self.step_duration

    @property
    def correlation(self) -> float:
        return bessel_j0(2.0 * math.pi * self.doppler_step)

    def user_distances(self) -> np.ndarray:
        if self.num_users == 1:
            return np.array([self.distance_near])
        return np.linspace(self.distance_near, self.distance_far, self.num_users)

    def pathloss(self) -> np.ndarray:
        # d_ref = 1 m
        return self.user_distances() ** (-self.pathloss_exponent)

    def validate(self) -> "ChannelConfig":
        for name in ("num_antennas", "num_users", "time_steps"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        for name in ("step_duration", "carrier_wavelength", "distance_near", "distance_far",
                     "noise_variance", "total_power"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be > 0")
        if self.velocity_kmh < 0:
            raise InvalidConfig("velocity_kmh must be >= 0")
        if not 2.0 <= self.pathloss_exponent <= 6.0:
            raise InvalidConfig("pathloss_exponent must lie in [2, 6]")
        if 2.0 * math.pi * self.doppler_step >= 50.0:
            raise InvalidConfig("Doppler step too large for the correlation model")
        return self


@dataclass(frozen=True)
class Observables:
    rsrq_db: float
    snr_db: float
    cqi: int
    pdd_score: float = 0.0


def snr_db_from_gain(gain, total_power: float, noise_variance: float):
    g = np.asarray(gain, dtype=float) * total_power / noise_variance
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(g)
    return np.clip(snr, *SNR_RANGE_DB)


def rsrq_from_snr_db(snr_db):
    lo, hi = SNR_RANGE_DB
    rlo, rhi = RSRQ_RANGE_DB
    return (np.asarray(snr_db, dtype=float) - lo) / (hi - lo) * (rhi - rlo) + rlo


def cqi_from_snr_db(snr_db):
    lo, hi = SNR_RANGE_DB
    frac = (np.clip(np.asarray(snr_db, dtype=float), lo, hi) - lo) / (hi - lo)
    return np.floor(frac * (CQI_LEVELS - 1)).astype(int)


def observables_from_channel(h_t, w, cfg: ChannelConfig, pdd_score: float = 0.0) -> Observables:
    """SNR/RSRQ/CQI seen through precoder ``w`` on channel ``h_t``.

    RSRQ is an affine image of the clipped SNR onto the RSRQ range; CQI is a
    16-level floor quantisation of the same SNR.
    """
    h_t = np.asarray(h_t, dtype=complex).reshape(-1)
    w = np.asarray(w, dtype=complex).reshape(-1)
    if h_t.shape != w.shape:
        raise ValueError(f"h has {h_t.size} entries but w has {w.size}")
    gain = abs(np.vdot(h_t, w)) ** 2
    snr = float(snr_db_from_gain(gain, cfg.total_power, cfg.noise_variance))
    return Observables(
        rsrq_db=float(rsrq_from_snr_db(snr)),
        snr_db=snr,
        cqi=int(cqi_from_snr_db(snr)),
        pdd_score=float(pdd_score),
    )


@dataclass(frozen=True)
class ChannelTrace:
    """Per-step, per-user channels and observables.

    Arrays are indexed ``[t, k]`` (``h`` additionally by antenna).
    """

    h: np.ndarray  # (T, K, M) complex
    gains: np.ndarray  # (T, K)
    snr_db: np.ndarray
    rsrq_db: np.ndarray
    cqi: np.ndarray
    pdd_score: np.ndarray
    correlation: float

    @property
    def time_steps(self) -> int:
        return self.h.shape[0]

    @property
    def num_users(self) -> int:
        return self.h.shape[1]

    def with_pdd(self, pdd_score) -> "ChannelTrace":
        pdd_score = np.asarray(pdd_score, dtype=float)
        if pdd_score.shape != self.gains.shape:
            raise ValueError("pdd_score must have shape (T, K)")
        return dataclasses.replace(self, pdd_score=pdd_score)

    def observables(self, t: int, k: int) -> Observables:
        return Observables(float(self.rsrq_db[t, k]), float(self.snr_db[t, k]),
                           int(self.cqi[t, k]), float(self.pdd_score[t, k]))


def gauss_markov(h0: np.ndarray, steps: int, rho: float, variance, rng: SeededRng) -> np.ndarray:
    """Evolve ``h0`` for ``steps`` steps: ``h[t+1] = rho h[t] + sqrt(1 - rho^2) u[t]``.

    ``variance`` broadcasts against ``h0`` and sets the innovation power so the
    process stays stationary.
    """
    out = np.empty((steps,) + h0.shape, dtype=complex)
    out[0] = h0
    if steps == 1:
        return out
    innov_scale = math.sqrt(max(1.0 - rho * rho, 0.0))
    if innov_scale == 0.0:
        out[1:] = h0
        return out
    u = draw_complex_gaussian(rng, (steps - 1,) + h0.shape, 1.0) * np.sqrt(variance)
    for t in range(1, steps):
        out[t] = rho * out[t - 1] + innov_scale * u[t - 1]
    return out


def generate_trace(cfg: ChannelConfig, rng: SeededRng) -> ChannelTrace:
    cfg.validate()
    K, M, T = cfg.num_users, cfg.num_antennas, cfg.time_steps
    pl = cfg.pathloss()[:, None]  # (K, 1)
    rho = cfg.correlation
    h0 = draw_complex_gaussian(rng, (K, M), 1.0) * np.sqrt(pl)
    h = gauss_markov(h0, T, rho, pl, rng)
    # maximum-ratio precoding on the true channel: |h^H w|^2 = ||h||^2
    gains = np.sum(np.abs(h) ** 2, axis=-1)
    snr = snr_db_from_gain(gains, cfg.total_power, cfg.noise_variance)
    return ChannelTrace(
        h=h,
        gains=gains,
        snr_db=snr,
        rsrq_db=rsrq_from_snr_db(snr),
        cqi=cqi_from_snr_db(snr),
        pdd_score=np.zeros_like(gains),
        correlation=rho,
    )


def trace_csv_header(num_antennas: int) -> list[str]:
    cols = ["t", "user"]
    for m in range(num_antennas):
        cols += [f"h{m}_re", f"h{m}_im"]
    return cols + ["gain", "snr_db", "rsrq_db", "cqi", "pdd_score"]


def write_trace_csv(trace: ChannelTrace, path) -> None:
    T, K, M = trace.h.shape
    fmt = "{:.9g}".format
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_csv_header(M))
        for t in range(T):
            for k in range(K):
                row = [t, k]
                for m in range(M):
                    row += [fmt(trace.h[t, k, m].real), fmt(trace.h[t, k, m].imag)]
                row += [fmt(trace.gains[t, k]), fmt(trace.snr_db[t, k]), fmt(trace.rsrq_db[t, k]),
                        int(trace.cqi[t, k]), fmt(trace.pdd_score[t, k])]
                w.writerow(row)


def read_trace_csv(path) -> dict[str, np.ndarray]:
    """Column arrays of a trace CSV (no reconstruction of the trace object)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
    return cols
