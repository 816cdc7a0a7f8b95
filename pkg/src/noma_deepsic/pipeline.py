"""Deep-SIC estimation chain for a two-user NOMA downlink at the near user.

Both power-domain streams reach the near user (index 0, low power) through
one effective channel ``g``. Each slot carries pilots followed by
superposed QPSK data: MMSE on the pilots, SIC on the data, then data-aided
gradient refinement of ``||y - J g||^2`` where ``J`` stacks the pilots and
the re-modulated superposed decisions. Rows whose decisions carry a PDD
residual ``s - s_hat`` fit the wrong model; with PDD enabled the refinement
adds a correction that cancels their gradient contribution. A transformer then refines the last slot of a window from
the per-slot token sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, gauss_markov
from .estimation import dft_pilots, mmse_estimate, pdd_corrected_update, pilot_autocorrelation, start_refinement
from .noma_link import PowerAllocation, pdd_reliability, random_qpsk, sic_decode, soft_pdd_residual
from .numerics import SeededRng, draw_complex_gaussian
from .transformer import Standardizer, TransformerConfig, TransformerModel, train

PDD_SOURCES = ("truth", "soft")
FEATURES = ("gain_re", "gain_im", "mean_abs_llr", "pdd_score")
OWN, FAR = 0, 1


@dataclass(frozen=True)
class DeepSicConfig:
    snr_db: float = 0.0
    n_pilot: int = 4
    n_data: int = 32
    powers: tuple = (0.2, 0.8)
    window: int = 10
    refine_iters: int = 20
    outer_rounds: int = 2
    llr_gate: float = 0.0
    use_pdd: bool = True
    # "truth": residual from the transmitted symbols (simulation mode);
    # "soft": LLR-based expected residual available at a real receiver
    pdd_source: str = "truth"
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        if self.pdd_source not in PDD_SOURCES:
            raise ValueError(f"pdd_source must be one of {PDD_SOURCES}")
        if len(self.powers) != 2:
            raise ValueError("the pipeline models two users")
        if self.n_pilot < 2 or self.n_data < 1 or self.window < 1:
            raise ValueError("n_pilot >= 2, n_data >= 1 and window >= 1 required")

    @property
    def noise_variance(self) -> float:
        """``snr_db`` is the transmit SNR referenced to the cell-edge user."""
        return 10 ** (-self.snr_db / 10)

    @property
    def channel_variance(self) -> float:
        """Near-user channel power relative to the far user (path-loss advantage)."""
        ch = self.channel
        return (ch.distance_far / ch.distance_near) ** ch.pathloss_exponent

    @property
    def power_allocation(self) -> PowerAllocation:
        return PowerAllocation(tuple(self.powers))

    def without_pdd(self) -> "DeepSicConfig":
        from dataclasses import replace
        return replace(self, use_pdd=False)


@dataclass(frozen=True)
class SlotDraw:
    """All randomness of one slot, drawn before any processing."""

    gain: complex              # true effective channel of the near user
    symbols: np.ndarray        # (2, n_data)
    pilot_noise: np.ndarray    # (n_pilot,)
    data_noise: np.ndarray     # (n_data,)


@dataclass
class SlotResult:
    g_init: complex
    g_refined: complex
    mean_abs_llr: float
    pdd_score: float
    ber_own: float
    loss_history: tuple
    certified: bool
    pdd_applied: bool


def draw_window(cfg: DeepSicConfig, rng: SeededRng) -> list[SlotDraw]:
    """Gauss-Markov near-user channel plus per-slot symbols and noise."""
    rho = cfg.channel.correlation
    var = cfg.channel_variance
    g0 = draw_complex_gaussian(rng, 1, var)
    gains = gauss_markov(g0, cfg.window, rho, var, rng)[:, 0]
    sigma2 = cfg.noise_variance
    out = []
    for t in range(cfg.window):
        out.append(SlotDraw(
            gain=complex(gains[t]),
            symbols=random_qpsk(rng, (2, cfg.n_data)),
            pilot_noise=draw_complex_gaussian(rng, cfg.n_pilot, sigma2),
            data_noise=draw_complex_gaussian(rng, cfg.n_data, sigma2),
        ))
    return out


def pilot_sequence(cfg: DeepSicConfig) -> np.ndarray:
    """Unit-modulus pilot row sent at full power."""
    return dft_pilots(1, cfg.n_pilot).row(0)


def initial_estimate(y_p, s, noise_variance: float, prior_variance: float = 1.0) -> complex:
    """MMSE on the pilots."""
    return complex(mmse_estimate(y_p, s, prior_variance, pilot_autocorrelation(s), noise_variance)[0])


def pdd_flags(sic, source: str) -> np.ndarray:
    """Per data symbol weight in [0, 1] of being corrupted by a decision error.

    ``truth`` flags symbols with a nonzero residual ``s - s_hat`` in either
    stream. ``soft`` uses the LLR-implied probability that at least one of
    the four decided bits is wrong.
    """
    if source == "truth":
        return np.any([np.abs(sic.pdd_residual[k]) > 0 for k in (OWN, FAR)], axis=0).astype(float)
    p_correct = 1.0
    for k in (OWN, FAR):
        for llr in sic.llr[k]:
            p_correct = p_correct * (1.0 + np.tanh(np.abs(llr) / 2.0)) / 2.0
    return 1.0 - p_correct


def _refine(g_hat, y, J, flags, llr, cfg: DeepSicConfig):
    """Certified gradient refinement; returns (state, certified, pdd_applied).

    The PDD term is ``psi = J^H e_pdd`` with ``e_pdd = m * (y - J g)``: the
    residual on rows flagged as decision errors, which removes their
    contribution from the data-aided gradient. It is linear in ``g`` with
    Lipschitz constant ``sum m |J|^2``, passed to the certificate as beta.
    An uncertified correction is dropped for the round instead of run
    unguarded.
    """
    use = flags is not None and bool(np.any(flags > 0))
    beta = float(np.sum(flags * np.abs(J[:, 0]) ** 2)) if use else 0.0
    state, cert = start_refinement(np.array([g_hat]), J, beta=beta)
    if use and not cert.certified:
        state, cert = start_refinement(np.array([g_hat]), J)
        use = False
    for _ in range(cfg.refine_iters):
        e_pdd = flags * (y - J[:, 0] * state.h[0]) if use else None
        state = pdd_corrected_update(state, y, J, e_pdd=e_pdd, llr=llr, llr_gate=cfg.llr_gate)
    return state, cert.certified, use


@dataclass(frozen=True)
class SlotSystem:
    """Linear model ``y = J g`` of one refinement round."""

    y: np.ndarray          # pilots then data
    J: np.ndarray          # (n_pilot + n_data, 1)
    flags: np.ndarray | None
    llr: np.ndarray
    ber_own: float


def slot_system(draw: SlotDraw, cfg: DeepSicConfig, g_hat: complex) -> SlotSystem:
    """Decode the data with ``g_hat`` and stack pilots and re-modulated decisions."""
    pa = cfg.power_allocation
    amp = np.sqrt(pa.array)
    s_p = pilot_sequence(cfg)
    y_p = draw.gain * s_p + draw.pilot_noise
    y_d = draw.gain * (amp @ draw.symbols) + draw.data_noise
    order = [FAR, OWN]
    sic = sic_decode(y_d, [g_hat, g_hat], pa, order, cfg.noise_variance, truth=draw.symbols)
    dec = sic.decoded_symbols
    J = np.concatenate([s_p, amp[OWN] * dec[OWN] + amp[FAR] * dec[FAR]])[:, None]
    llr = np.concatenate([np.abs(np.concatenate(sic.llr[k])) for k in order])
    flags = None
    if cfg.use_pdd:
        flags = np.concatenate([np.zeros(s_p.size), pdd_flags(sic, cfg.pdd_source)])
    return SlotSystem(np.concatenate([y_p, y_d]), J, flags, llr,
                      float(np.mean(dec[OWN] != draw.symbols[OWN])))


def slot_initial_estimate(draw: SlotDraw, cfg: DeepSicConfig) -> complex:
    s_p = pilot_sequence(cfg)
    return initial_estimate(draw.gain * s_p + draw.pilot_noise, s_p, cfg.noise_variance, cfg.channel_variance)


def process_slot(draw: SlotDraw, cfg: DeepSicConfig) -> SlotResult:
    pa = cfg.power_allocation
    amp = np.sqrt(pa.array)
    sigma2 = cfg.noise_variance
    y_d = draw.gain * (amp @ draw.symbols) + draw.data_noise
    order = [FAR, OWN]

    g_hat = slot_initial_estimate(draw, cfg)
    g_init = g_hat
    losses: list[float] = []
    certified, applied = True, False
    for _ in range(cfg.outer_rounds):
        sys_ = slot_system(draw, cfg, g_hat)
        state, ok, used = _refine(g_hat, sys_.y, sys_.J, sys_.flags, sys_.llr, cfg)
        certified &= ok
        applied |= used
        losses.extend(state.loss_history)
        g_hat = complex(state.h[0])

    sic = sic_decode(y_d, [g_hat, g_hat], pa, order, sigma2, truth=draw.symbols)
    l0, l1 = sic.llr[OWN]
    soft = soft_pdd_residual(sic.decoded_symbols[OWN], l0, l1)
    return SlotResult(
        g_init=g_init,
        g_refined=g_hat,
        mean_abs_llr=float(np.mean(np.abs(np.concatenate([l0, l1])))),
        pdd_score=pdd_reliability(soft).score if cfg.use_pdd else 0.0,
        ber_own=float(np.mean(sic.decoded_symbols[OWN] != draw.symbols[OWN])),
        loss_history=tuple(losses),
        certified=certified,
        pdd_applied=applied,
    )


@dataclass
class WindowResult:
    features: np.ndarray   # (window, 4) raw token features
    truth: np.ndarray      # (window,) true channel
    refined: np.ndarray    # (window,) refined estimate
    initial: np.ndarray    # (window,) MMSE estimate
    ber_own: float
    certified: bool
    pdd_applied_frac: float


def run_window(cfg: DeepSicConfig, rng: SeededRng) -> WindowResult:
    draws = draw_window(cfg, rng)
    slots = [process_slot(d, cfg) for d in draws]
    feats = np.array([[s.g_refined.real, s.g_refined.imag, s.mean_abs_llr, s.pdd_score] for s in slots])
    return WindowResult(
        features=feats,
        truth=np.array([d.gain for d in draws]),
        refined=np.array([s.g_refined for s in slots]),
        initial=np.array([s.g_init for s in slots]),
        ber_own=float(np.mean([s.ber_own for s in slots])),
        certified=all(s.certified for s in slots),
        pdd_applied_frac=float(np.mean([s.pdd_applied for s in slots])),
    )


@dataclass
class Dataset:
    X: np.ndarray          # (S, window, 4)
    truth: np.ndarray      # (S,) complex gain at the last slot
    refined: np.ndarray    # (S,) refined estimate at the last slot
    initial: np.ndarray    # (S,)
    ber_own: np.ndarray    # (S,)
    certified: bool
    pdd_applied_frac: float = 0.0

    @property
    def residual_targets(self) -> np.ndarray:
        """Re/Im of the correction the transformer has to learn, shape (S, 2)."""
        d = self.truth - self.refined
        return np.stack([d.real, d.imag], axis=1)


def build_dataset(cfg: DeepSicConfig, n_windows: int, seed: int, stream: int = 0) -> Dataset:
    """Windows ``i`` use stream ``(stream, i)``, so configurations differing
    only in ``use_pdd`` see identical channels, symbols and noise."""
    root = SeededRng(seed, stream)
    results = [run_window(cfg, root.child(i)) for i in range(n_windows)]
    return Dataset(
        X=np.stack([r.features for r in results]),
        truth=np.array([r.truth[-1] for r in results]),
        refined=np.array([r.refined[-1] for r in results]),
        initial=np.array([r.initial[-1] for r in results]),
        ber_own=np.array([r.ber_own for r in results]),
        certified=all(r.certified for r in results),
        pdd_applied_frac=float(np.mean([r.pdd_applied_frac for r in results])),
    )


@dataclass
class Refiner:
    """Transformer that predicts the correction to the last refined estimate."""

    model: TransformerModel

    def predict(self, ds: Dataset) -> np.ndarray:
        X = self.model.standardizer.transform(ds.X)
        out = self.model.forward(X)
        return ds.refined + out[:, 0] + 1j * out[:, 1]


def fit_refiner(ds: Dataset, epochs: int = 200, tcfg: TransformerConfig | None = None,
                eta: float | None = None) -> Refiner:
    tcfg = tcfg or TransformerConfig(seq_len=ds.X.shape[1], d_out=2, input_features=ds.X.shape[2])
    st = Standardizer.fit(ds.X)
    model = TransformerModel(tcfg, st)
    train(model, st.transform(ds.X), ds.residual_targets, epochs=epochs, eta=eta)
    return Refiner(model)


def complex_to_real(z) -> np.ndarray:
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag])


@dataclass(frozen=True)
class BerComparison:
    snr_db: float
    ber_base: float        # SIC with the pilot-only MMSE estimate
    ber_deepsic: float     # SIC with the refined estimate
    gain_base_sq: float    # mean effective gain |g|^2 - |g_hat - g|^2
    gain_deepsic_sq: float
    noise_variance: float


def ber_comparison(cfg: DeepSicConfig, n_slots: int, seed: int, stream: int = 0) -> BerComparison:
    """Own-stream BER and effective channel gain of the MMSE-only and Deep-SIC receivers.

    The estimation error costs its power in the effective gain, so both
    receivers see the same channels and differ only through their estimates.
    """
    cfg1 = DeepSicConfig(**{**cfg.__dict__, "window": 1})
    pa = cfg1.power_allocation
    amp = np.sqrt(pa.array)
    root = SeededRng(seed, stream)
    eb = ed = gb = gd = 0.0
    for i in range(n_slots):
        d = draw_window(cfg1, root.child(i))[0]
        r = process_slot(d, cfg1)
        y = d.gain * (amp @ d.symbols) + d.data_noise
        base = sic_decode(y, [r.g_init, r.g_init], pa, [FAR, OWN], cfg1.noise_variance)
        eb += float(np.mean(base.decoded_symbols[OWN] != d.symbols[OWN]))
        ed += r.ber_own
        p = abs(d.gain) ** 2
        gb += p - abs(r.g_init - d.gain) ** 2
        gd += p - abs(r.g_refined - d.gain) ** 2
    n = float(n_slots)
    return BerComparison(cfg.snr_db, eb / n, ed / n, gb / n, gd / n, cfg1.noise_variance)
