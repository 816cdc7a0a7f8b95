"""Two-cell handover with a PDD-aware trigger, time-to-trigger, HOF and ping-pong accounting.

Score of a cell: ``csi_db - alpha * pdd_score`` (lower residual power is
more reliable). A handover fires once the target beats the serving cell by
``hysteresis_db`` for ``ttt_steps`` consecutive steps. It is a failure (HOF)
when the new serving cell's SINR drops below ``hof_sinr_floor_db`` within
``hof_window`` steps, and a ping-pong when it returns to the cell it just
left within ``pingpong_window`` steps.

:func:`step_handover` is the reference state machine. :func:`simulate_counts`
runs the same rules vectorised over independent traces for the sweeps.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import wilcoxon

from .channel import ChannelConfig
from .noma_link import PddReliability, QPSK_POINTS
from .numerics import SeededRng, bessel_j0, draw_complex_gaussian

EVENT_KINDS = ("trigger_start", "trigger_abort", "handover", "hof", "pingpong")
POLICIES = ("pure_csi", "deepsic_no_pdd", "deepsic_pdd")
SWEEP_HEADER = ["velocity_kmh", "policy", "trials", "handovers", "hofs", "pingpongs", "hof_rate", "pingpong_rate"]


@dataclass(frozen=True)
class HandoverConfig:
    alpha: float = 0.5
    ttt_steps: int = 3
    hysteresis_db: float = 1.0
    pingpong_window: int = 20
    hof_sinr_floor_db: float = -8.0
    hof_window: int = 3
    velocity_kmh: float = 60.0

    def __post_init__(self):
        if self.alpha < 0 or self.hysteresis_db < 0 or self.ttt_steps < 0:
            raise ValueError("alpha, hysteresis_db and ttt_steps must be >= 0")
        if self.pingpong_window <= self.ttt_steps:
            raise ValueError("pingpong_window must exceed ttt_steps")
        if self.hof_window < 1:
            raise ValueError("hof_window must be >= 1")

    @property
    def fire_after(self) -> int:
        return max(self.ttt_steps, 1)


def decision_score(csi_db: float, pdd, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    score = pdd.score if isinstance(pdd, PddReliability) else float(pdd)
    return csi_db + alpha * (-score)


@dataclass(frozen=True)
class HandoverEvent:
    t: int
    kind: str
    serving_cell: int
    target_cell: int
    score0: float
    score1: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class HandoverLog:
    events: list[HandoverEvent] = field(default_factory=list)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    @property
    def handover_count(self) -> int:
        return self.count("handover")

    @property
    def hof_count(self) -> int:
        return self.count("hof")

    @property
    def pingpong_count(self) -> int:
        return self.count("pingpong")

    def write_ndjson(self, path, mode: str = "w") -> None:
        with open(path, mode) as fh:
            for e in self.events:
                fh.write(e.to_json() + "\n")


@dataclass(frozen=True)
class HandoverState:
    t: int = 0
    serving: int = 0
    counter: int = 0
    previous: int = -1
    last_handover: int = -(10 ** 9)
    hof_until: int = -1

    @property
    def target(self) -> int:
        return 1 - self.serving


def step_handover(state: HandoverState, scores, cfg: HandoverConfig, snr_db=None):
    """Advance one step. ``scores`` and ``snr_db`` are per cell (cell 0, cell 1).

    Returns the new state and the events raised at this step, in order.
    """
    t = state.t
    s0, s1 = float(scores[0]), float(scores[1])
    ev = []

    def event(kind, serving, target):
        ev.append(HandoverEvent(t, kind, serving, target, s0, s1))

    serving, target = state.serving, state.target
    hof_until = state.hof_until
    # failure check on the cell that is serving going into this step
    if snr_db is not None and t <= hof_until and float(snr_db[serving]) < cfg.hof_sinr_floor_db:
        event("hof", serving, target)
        hof_until = -1

    cond = float(scores[target]) > float(scores[serving]) + cfg.hysteresis_db
    counter, previous, last = state.counter, state.previous, state.last_handover
    if cond:
        counter += 1
        if counter == 1:
            event("trigger_start", serving, target)
        if counter >= cfg.fire_after:
            event("handover", serving, target)
            if previous == target and t - last <= cfg.pingpong_window:
                event("pingpong", target, serving)
            previous, serving, last = serving, target, t
            counter = 0
            hof_until = t + cfg.hof_window
    elif counter > 0:
        event("trigger_abort", serving, target)
        counter = 0
    new = HandoverState(t + 1, serving, counter, previous, last, hof_until)
    return new, ev


def run_trace(scores, cfg: HandoverConfig, snr_db=None, state: HandoverState | None = None) -> HandoverLog:
    """Run the state machine over ``scores`` of shape (T, 2)."""
    scores = np.asarray(scores, dtype=float)
    state = state or HandoverState()
    log = HandoverLog()
    for t in range(scores.shape[0]):
        state, ev = step_handover(state, scores[t], cfg, None if snr_db is None else snr_db[t])
        log.events.extend(ev)
    return log


@dataclass
class BatchCounts:
    handovers: np.ndarray
    hofs: np.ndarray
    pingpongs: np.ndarray


def simulate_counts(scores, cfg: HandoverConfig, snr_db=None) -> BatchCounts:
    """Same rules as :func:`step_handover`, vectorised over N traces of shape (N, T, 2)."""
    scores = np.asarray(scores, dtype=float)
    N, T, _ = scores.shape
    idx = np.arange(N)
    serving = np.zeros(N, dtype=np.int64)
    counter = np.zeros(N, dtype=np.int64)
    previous = np.full(N, -1, dtype=np.int64)
    last = np.full(N, -(10 ** 9), dtype=np.int64)
    hof_until = np.full(N, -1, dtype=np.int64)
    ho = np.zeros(N, dtype=np.int64)
    hof = np.zeros(N, dtype=np.int64)
    pp = np.zeros(N, dtype=np.int64)
    fire = cfg.fire_after
    for t in range(T):
        if snr_db is not None:
            fail = (t <= hof_until) & (snr_db[idx, t, serving] < cfg.hof_sinr_floor_db)
            hof += fail
            hof_until[fail] = -1
        target = 1 - serving
        cond = scores[idx, t, target] > scores[idx, t, serving] + cfg.hysteresis_db
        counter = np.where(cond, counter + 1, 0)
        go = counter >= fire
        if go.any():
            ho += go
            pp += go & (previous == target) & (t - last <= cfg.pingpong_window)
            previous = np.where(go, serving, previous)
            serving = np.where(go, target, serving)
            last = np.where(go, t, last)
            hof_until = np.where(go, t + cfg.hof_window, hof_until)
            counter[go] = 0
    return BatchCounts(ho, hof, pp)


# ---------------------------------------------------------------------- mobility sweep

@dataclass(frozen=True)
class SweepConfig:
    """Crossing between two cells spaced ``distance_near + distance_far`` apart.

    The UE starts on the cell-0 side and moves along the line between the
    base stations, centred on the midpoint, for ``channel.time_steps``
    steps; positions are clipped to the ``[distance_near, distance_far]``
    stretch. Each cell reaches the UE through one Rayleigh path.
    """

    handover: HandoverConfig = field(default_factory=HandoverConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    estimate_delay: int = 1
    filter_steps: int = 200
    pdd_filter_steps: int = 3
    n_pdd_symbols: int = 16
    # estimation error variance per policy, in units of noise variance
    error_scale: tuple = ()

    def scale_for(self, policy: str) -> float:
        table = dict(self.error_scale) if self.error_scale else default_error_scale()
        return table[policy]


@lru_cache(maxsize=4)
def default_error_scale(n_slots: int = 300, seed: int = 2024) -> dict:
    """Measured estimation MSE / noise variance of each policy's estimator.

    Runs the Deep-SIC slot pipeline at its default operating point: pilot
    MMSE for ``pure_csi``, refinement without and with PDD for the others.
    """
    from .pipeline import DeepSicConfig, draw_window, process_slot

    cfg = DeepSicConfig(window=1)
    err = {p: 0.0 for p in POLICIES}
    root = SeededRng(seed, 31)
    for i in range(n_slots):
        d = draw_window(cfg, root.child(i))[0]
        a = process_slot(d, cfg)
        b = process_slot(d, cfg.without_pdd())
        err["pure_csi"] += abs(a.g_init - d.gain) ** 2
        err["deepsic_pdd"] += abs(a.g_refined - d.gain) ** 2
        err["deepsic_no_pdd"] += abs(b.g_refined - d.gain) ** 2
    return {k: v / n_slots / cfg.noise_variance for k, v in err.items()}


def crossing_positions(cfg: SweepConfig, velocity_kmh: float) -> np.ndarray:
    ch = cfg.channel
    T = ch.time_steps
    mid = 0.5 * (ch.distance_near + ch.distance_far)
    x = mid + velocity_kmh / 3.6 * (np.arange(T) - T / 2) * ch.step_duration
    return np.clip(x, ch.distance_near, ch.distance_far)


@dataclass
class CrossingDraw:
    h: np.ndarray        # (N, T, 2) true channels
    est_noise: np.ndarray  # (N, T, 2) unit-variance estimation noise
    symbols: np.ndarray  # (N, T, 2, n) QPSK for the PDD measurement
    data_noise: np.ndarray  # (N, T, 2, n) unit-variance receiver noise


def draw_crossing(cfg: SweepConfig, velocity_kmh: float, trials: int, rng: SeededRng) -> CrossingDraw:
    ch = cfg.channel
    T = ch.time_steps
    x = crossing_positions(cfg, velocity_kmh)
    spacing = ch.distance_near + ch.distance_far
    pl = np.stack([x, spacing - x], axis=1) ** (-ch.pathloss_exponent)  # (T, 2)
    doppler = velocity_kmh / 3.6 / ch.carrier_wavelength * ch.step_duration
    rho = bessel_j0(2 * math.pi * doppler)
    g = rng.gen
    innov = draw_complex_gaussian(rng, (T, trials, 2), 1.0)
    fade = np.empty((T, trials, 2), dtype=complex)
    fade[0] = innov[0]
    scale = math.sqrt(max(1 - rho * rho, 0.0))
    for t in range(1, T):
        fade[t] = rho * fade[t - 1] + scale * innov[t]
    h = np.transpose(fade, (1, 0, 2)) * np.sqrt(pl)[None]
    n = cfg.n_pdd_symbols
    bits = g.integers(0, 4, size=(trials, T, 2, n))
    return CrossingDraw(
        h=h,
        est_noise=draw_complex_gaussian(rng, (trials, T, 2), 1.0),
        symbols=QPSK_POINTS[bits],
        data_noise=draw_complex_gaussian(rng, (trials, T, 2, n), 1.0),
    )


def policy_scores(draw: CrossingDraw, cfg: SweepConfig, policy: str):
    """Decision scores and detector SINRs (dB), each (N, T, 2), for one policy.

    The SINR of a cell treats the other cell's signal and the error of the
    estimate the detector works with (aging plus estimation noise) as noise.

    The estimate used at step t is the delayed channel plus estimation noise
    of the policy's measured variance; the PDD score is the residual power
    of QPSK symbols received on the current channel and decided with that
    estimate. Estimated power is averaged over the last ``filter_steps``
    steps and the PDD score over the last ``pdd_filter_steps``.
    """
    ch = cfg.channel
    sigma2 = ch.noise_variance
    d = cfg.estimate_delay
    h = draw.h
    h_old = np.concatenate([np.repeat(h[:, :1], d, axis=1), h[:, : h.shape[1] - d]], axis=1) if d else h
    h_hat = h_old + math.sqrt(cfg.scale_for(policy) * sigma2) * draw.est_noise
    # detector SINR: the other cell interferes, estimation and aging error act as noise
    sig = np.abs(h) ** 2
    interference = sig[..., ::-1] + np.abs(h - h_hat) ** 2
    snr_true = 10 * np.log10(sig / (sigma2 + interference))
    power = causal_mean(np.abs(h_hat) ** 2, cfg.filter_steps)
    csi_db = 10 * np.log10(np.maximum(power, 1e-300) / sigma2)
    if policy != "deepsic_pdd":
        return csi_db, snr_true
    y = h[..., None] * draw.symbols + math.sqrt(sigma2) * draw.data_noise
    z = y / h_hat[..., None]
    s_hat = (np.sign(z.real) + 1j * np.sign(z.imag)) * math.sqrt(0.5)
    pdd = causal_mean(np.mean(np.abs(draw.symbols - s_hat) ** 2, axis=-1), cfg.pdd_filter_steps)
    return csi_db - cfg.handover.alpha * pdd, snr_true


def causal_mean(x, window: int) -> np.ndarray:
    """Mean over the last ``window`` steps along axis 1 (fewer at the start)."""
    c = np.cumsum(x, axis=1)
    out = c.copy()
    out[:, window:] = c[:, window:] - c[:, :-window]
    n = np.minimum(np.arange(1, x.shape[1] + 1), window).reshape((1, -1) + (1,) * (x.ndim - 2))
    return out / n


@dataclass(frozen=True)
class SweepRow:
    velocity_kmh: float
    policy: str
    trials: int
    handovers: int
    hofs: int
    pingpongs: int

    @property
    def hof_rate(self) -> float:
        return self.hofs / self.trials

    @property
    def pingpong_rate(self) -> float:
        return self.pingpongs / self.trials

    def as_csv_row(self) -> list:
        return [f"{self.velocity_kmh:g}", self.policy, self.trials, self.handovers, self.hofs,
                self.pingpongs, f"{self.hof_rate:.9g}", f"{self.pingpong_rate:.9g}"]


def run_mobility_sweep(velocities, trials: int, cfg: SweepConfig, rng: SeededRng,
                       policies=POLICIES, per_trial: bool = False):
    """HOF / ping-pong rates per (velocity, policy); rates are counts / trials.

    ``hofs`` counts trials with at least one failure, so ``hof_rate`` is a
    binomial proportion; ``pingpongs`` counts events.

    Every policy at a given velocity sees the same channels and noise
    (paired trials); velocity ``i`` uses the child stream ``i``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows, raw = [], {}
    for i, v in enumerate(velocities):
        draw = draw_crossing(cfg, v, trials, rng.child(i))
        for policy in policies:
            scores, snr = policy_scores(draw, cfg, policy)
            c = simulate_counts(scores, cfg.handover, snr)
            raw[(v, policy)] = c
            rows.append(SweepRow(float(v), policy, trials, int(c.handovers.sum()),
                                 int((c.hofs > 0).sum()), int(c.pingpongs.sum())))
    return (rows, raw) if per_trial else rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_csv_row())


# ---------------------------------------------------------------------- adversarial trace

def oscillating_trace(steps: int, period: int, amplitude_db: float = 2.0, pdd_level: float = 4.0,
                      rng: SeededRng | None = None, jitter_db: float = 0.3):
    """Square-wave ``±amplitude_db`` advantage swapping between the cells.

    The cell that currently looks stronger also carries the higher PDD
    score (its advantage comes with unreliable decoding). Returns
    ``(csi_db, pdd_score)``, each (steps, 2).
    """
    t = np.arange(steps)
    phase = (t // max(period // 2, 1)) % 2
    csi = np.zeros((steps, 2))
    csi[:, 1] = np.where(phase == 0, amplitude_db, -amplitude_db)
    pdd = np.zeros((steps, 2))
    pdd[:, 1] = np.where(phase == 0, pdd_level, 0.0)
    pdd[:, 0] = np.where(phase == 0, 0.0, pdd_level)
    if rng is not None:
        csi = csi + jitter_db * rng.gen.standard_normal(csi.shape)
        pdd = np.clip(pdd + 0.5 * rng.gen.standard_normal(pdd.shape), 0.0, None)
    return csi, pdd


@dataclass(frozen=True)
class PingPongComparison:
    baseline: np.ndarray   # per-trial ping-pongs at alpha = 0
    pdd: np.ndarray        # per-trial ping-pongs at cfg.alpha
    p_value: float


def pingpong_comparison(trials: int, cfg: HandoverConfig, rng: SeededRng, steps: int = 200,
                        period: int = 10) -> PingPongComparison:
    """Paired ping-pong counts on jittered oscillating traces; one-sided Wilcoxon test."""
    if period >= cfg.pingpong_window:
        raise ValueError("period must be shorter than the ping-pong window")
    base_cfg = dataclasses.replace(cfg, alpha=0.0)
    csi_all, pdd_all = [], []
    for i in range(trials):
        csi, p = oscillating_trace(steps, period, rng=rng.child(i))
        csi_all.append(csi)
        pdd_all.append(p)
    csi_all, pdd_all = np.stack(csi_all), np.stack(pdd_all)
    base = simulate_counts(csi_all, base_cfg).pingpongs
    pdd = simulate_counts(csi_all - cfg.alpha * pdd_all, cfg).pingpongs
    diff = base - pdd
    if np.all(diff == 0):
        p = 1.0
    else:
        p = float(wilcoxon(base, pdd, alternative="greater", zero_method="wilcox").pvalue)
    return PingPongComparison(base, pdd, p)
