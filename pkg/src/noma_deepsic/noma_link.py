"""Downlink power-domain NOMA link: superposition, QPSK, SIC and PDD residuals.

QPSK is Gray mapped with one bit per quadrature component,
``s = ((2 b0 - 1) + 1j (2 b1 - 1)) / sqrt(2)``, so a bit value of 1 maps to
the positive half-plane and ``llr > 0`` means bit 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from .numerics import DimensionMismatch, SeededRng, draw_complex_gaussian

SQRT_HALF = math.sqrt(0.5)
# constellation index i carries bits (i >> 1 & 1, i & 1)
QPSK_BITS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
QPSK_POINTS = ((2 * QPSK_BITS[:, 0] - 1) + 1j * (2 * QPSK_BITS[:, 1] - 1)) * SQRT_HALF


class EmptyOrder(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PowerAllocation:
    powers: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.powers, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("powers must be a non-empty 1-D sequence")
        if np.any(p <= 0):
            raise ValueError("every allocated power must be > 0")
        object.__setattr__(self, "powers", tuple(float(x) for x in p))

    @property
    def total(self) -> float:
        return float(math.fsum(self.powers))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.powers)

    def __len__(self):
        return len(self.powers)

    @classmethod
    def for_gains(cls, gains, total: float = 1.0, ratio: float = 4.0) -> "PowerAllocation":
        """Geometric split where each weaker user gets ``ratio`` times the next stronger one.

        With two users and the default ratio this is the 0.2 : 0.8 split.
        """
        gains = np.asarray(gains, dtype=float)
        rank = np.argsort(np.argsort(-gains, kind="stable"), kind="stable")  # 0 = strongest
        w = ratio ** rank.astype(float)
        return cls(tuple(total * w / w.sum()))

    def respects_ordering(self, gains) -> bool:
        gains = np.asarray(gains, dtype=float)
        p = self.array
        for i in range(len(p)):
            for j in range(len(p)):
                if gains[i] < gains[j] and not p[i] > p[j]:
                    return False
        return True


def mrt_precoders(h_hat) -> np.ndarray:
    """Maximum-ratio precoders ``w_k = h_k / ||h_k||`` as rows of a (K, M) array."""
    h_hat = np.atleast_2d(np.asarray(h_hat, dtype=complex))
    norms = np.linalg.norm(h_hat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot build a maximum-ratio precoder from a zero channel")
    return h_hat / norms


def superpose(symbols, pa: PowerAllocation, precoders) -> np.ndarray:
    """``x = sum_k sqrt(P_k) w_k s_k``.

    ``symbols`` is (K,) or (K, N); the result is (M,) or (M, N).
    """
    s = np.asarray(symbols, dtype=complex)
    W = np.atleast_2d(np.asarray(precoders, dtype=complex))
    if s.shape[0] != W.shape[0] or len(pa) != W.shape[0]:
        raise DimensionMismatch(f"{s.shape[0]} symbols, {W.shape[0]} precoders, {len(pa)} powers")
    amp = np.sqrt(pa.array)
    if s.ndim == 1:
        return W.T @ (amp * s)
    return W.T @ (amp[:, None] * s)


def receive(x, h, rng: SeededRng, noise_variance: float):
    """``y = h^H x + n`` with ``n ~ CN(0, noise_variance)``.

    ``x`` is (M,) or (M, N); returns a complex scalar or (N,) array.
    """
    h = np.asarray(h, dtype=complex).reshape(-1)
    x = np.asarray(x, dtype=complex)
    if x.shape[0] != h.size:
        raise DimensionMismatch(f"h has {h.size} entries but x has leading dim {x.shape[0]}")
    clean = h.conj() @ x
    if noise_variance <= 0:
        return clean
    n = draw_complex_gaussian(rng, np.shape(clean), noise_variance)
    return clean + (n if np.ndim(clean) else n.item())


def bits_to_qpsk(bits) -> np.ndarray:
    b = np.asarray(bits).reshape(-1, 2)
    return ((2 * b[:, 0] - 1) + 1j * (2 * b[:, 1] - 1)) * SQRT_HALF


def qpsk_to_bits(symbols) -> np.ndarray:
    s = np.asarray(symbols).reshape(-1)
    return np.stack([(s.real > 0).astype(int), (s.imag > 0).astype(int)], axis=1)


def random_qpsk(rng: SeededRng, shape) -> np.ndarray:
    idx = rng.gen.integers(0, 4, size=shape)
    return QPSK_POINTS[idx]


def qpsk_llr(y, gain, amplitude: float, noise_variance: float):
    """Exact per-bit LLRs ``log P(b=1|y) / P(b=0|y)`` by summing over all four points.

    Vectorised over ``y`` (and ``gain`` if it broadcasts); returns
    ``(llr_b0, llr_b1)``.
    """
    if not noise_variance > 0:
        raise ValueError("noise_variance must be > 0")
    y = np.asarray(y, dtype=complex)
    g = np.asarray(gain, dtype=complex)
    ref = (g * amplitude)[..., None] * QPSK_POINTS  # (..., 4)
    metric = -np.abs(y[..., None] - ref) ** 2 / noise_variance
    out = []
    for bit in range(2):
        one = QPSK_BITS[:, bit] == 1
        m1, m0 = metric[..., one], metric[..., ~one]
        # two points per hypothesis: logaddexp is the exact log-sum-exp
        out.append(np.logaddexp(m1[..., 0], m1[..., 1]) - np.logaddexp(m0[..., 0], m0[..., 1]))
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out[0], out[1]


def hard_decide(y, gain, amplitude: float) -> np.ndarray:
    """Nearest QPSK point to ``y`` under reference ``gain * amplitude * s``."""
    y = np.asarray(y, dtype=complex)
    g = np.asarray(gain, dtype=complex)
    ref = (g * amplitude)[..., None] * QPSK_POINTS
    idx = np.argmin(np.abs(y[..., None] - ref), axis=-1)
    return QPSK_POINTS[idx]


def soft_pdd_residual(decoded, llr_b0, llr_b1) -> np.ndarray:
    """Receiver-side PDD proxy from the LLRs, the expected ``s - s_hat``.

    Per quadrature component this is ``-s_hat_c (1 - tanh(|llr_c| / 2))``; its
    magnitude is the hard decision shrunk by the bit reliability.
    """
    d = np.asarray(decoded, dtype=complex)
    re = -d.real * (1.0 - np.tanh(np.abs(llr_b0) / 2.0))
    im = -d.imag * (1.0 - np.tanh(np.abs(llr_b1) / 2.0))
    return re + 1j * im


@dataclass
class SicResult:
    """Outcome of one SIC pass at one receiver.

    Per-user dictionaries are keyed by user index. ``pdd_residual`` is only
    populated when ground-truth symbols were supplied.
    """

    decoded_symbols: dict[int, np.ndarray]
    llr: dict[int, tuple[np.ndarray, np.ndarray]]
    pdd_residual: dict[int, np.ndarray] | None
    post_cancel_signal: np.ndarray
    stage_order: list[int]
    stage_signals: list[np.ndarray] = field(default_factory=list)


def sic_decode(y, gains, pa: PowerAllocation, order, noise_variance: float,
               truth=None, forced=None) -> SicResult:
    """Successive interference cancellation at one receiver.

    Parameters
    ----------
    y
        Received samples, scalar or (N,).
    gains
        Estimated effective gains ``h_hat^H w_k`` per user, shape (K,) or (K, N).
    order
        User indices, decoded first to last. The last entry is normally the
        receiver's own user; ``post_cancel_signal`` is the signal it is
        decoded from, after every earlier stage was cancelled.
    truth
        Optional (K,) / (K, N) transmitted symbols; enables exact PDD residuals.
    forced
        Optional ``{user: symbols}`` overriding the hard decision, for
        injecting decoding errors.

    Each stage's LLRs use the noise variance plus the power of the users not
    yet cancelled, treated as Gaussian interference.
    """
    order = list(order)
    if not order:
        raise EmptyOrder("SIC order must name at least one user")
    r = np.array(y, dtype=complex)
    g = np.asarray(gains, dtype=complex)
    p = pa.array
    decoded, llrs, residual, stages = {}, {}, ({} if truth is not None else None), []
    for i, k in enumerate(order):
        stages.append(r.copy())
        amp = math.sqrt(p[k])
        remaining = order[i + 1:]
        interf = sum(p[j] * np.abs(g[j]) ** 2 for j in remaining) if remaining else 0.0
        eff_var = noise_variance + interf
        if forced is not None and k in forced:
            s_hat = np.asarray(forced[k], dtype=complex)
        else:
            s_hat = hard_decide(r, g[k], amp)
        llrs[k] = qpsk_llr(r, g[k], amp, max(eff_var, 1e-300))
        decoded[k] = s_hat
        if truth is not None:
            residual[k] = np.asarray(truth[k], dtype=complex) - s_hat
        if i < len(order) - 1:
            r = r - g[k] * amp * s_hat
    return SicResult(decoded, llrs, residual, stages[-1], order, stages)


def ber_measure(truth, decoded) -> float:
    truth = np.asarray(truth).reshape(-1)
    decoded = np.asarray(decoded).reshape(-1)
    if truth.size != decoded.size:
        raise LengthMismatch(f"{truth.size} vs {decoded.size} bits")
    if truth.size == 0:
        raise LengthMismatch("need at least one bit")
    return float(np.count_nonzero(truth != decoded)) / truth.size


@dataclass(frozen=True)
class PddReliability:
    """Mean ``|s_tilde|^2`` over a window; 0 means every symbol was recovered."""

    score: float
    window_len: int


def pdd_reliability(residuals, window_len: int | None = None) -> PddReliability:
    r = np.asarray(residuals, dtype=complex).reshape(-1)
    if window_len is not None:
        r = r[-window_len:]
    if r.size == 0:
        return PddReliability(0.0, 0)
    return PddReliability(float(np.mean(np.abs(r) ** 2)), int(r.size))
