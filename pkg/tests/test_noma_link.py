import math
from itertools import product

import numpy as np
import pytest

from noma_deepsic.noma_link import (
    QPSK_POINTS,
    EmptyOrder,
    LengthMismatch,
    PowerAllocation,
    ber_measure,
    bits_to_qpsk,
    mrt_precoders,
    pdd_reliability,
    qpsk_llr,
    qpsk_to_bits,
    random_qpsk,
    receive,
    sic_decode,
    soft_pdd_residual,
    superpose,
)
from noma_deepsic.numerics import DimensionMismatch, SeededRng, draw_complex_gaussian


def brute_force_llr(y, g, a, var):
    # direct four-term evaluation, bit 1 <=> positive component
    num0 = den0 = num1 = den1 = 0.0
    for b0, b1 in product((0, 1), repeat=2):
        s = ((2 * b0 - 1) + 1j * (2 * b1 - 1)) / math.sqrt(2)
        p = math.exp(-abs(y - g * a * s) ** 2 / var)
        if b0:
            num0 += p
        else:
            den0 += p
        if b1:
            num1 += p
        else:
            den1 += p
    return math.log(num0 / den0), math.log(num1 / den1)


class TestPowerAllocation:
    def test_two_user_default(self):
        pa = PowerAllocation.for_gains([2.0, 0.5])
        assert pa.powers == pytest.approx((0.2, 0.8))
        assert pa.total == pytest.approx(1.0, abs=1e-15)
        assert pa.respects_ordering([2.0, 0.5])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            PowerAllocation((0.5, 0.0))

    def test_ordering_for_many_users(self):
        gains = [0.3, 5.0, 1.0, 0.01]
        pa = PowerAllocation.for_gains(gains, total=2.0)
        assert pa.total == pytest.approx(2.0)
        assert pa.respects_ordering(gains)


class TestSuperpose:
    def test_single_user(self):
        x = superpose([1.0], PowerAllocation((1.0,)), [[1, 0]])
        np.testing.assert_array_equal(x, [1, 0])

    def test_two_users_same_beam(self):
        x = superpose([1, 1], PowerAllocation((0.8, 0.2)), [[1, 0], [1, 0]])
        assert x[0].real == pytest.approx(math.sqrt(0.8) + math.sqrt(0.2))
        assert x[0].real == pytest.approx(1.3416, abs=1e-4)

    def test_orthogonal_energy(self):
        pa = PowerAllocation((0.7, 0.3))
        s = QPSK_POINTS[[1, 2]]
        x = superpose(s, pa, [[1, 0], [0, 1]])
        assert np.vdot(x, x).real == pytest.approx(1.0, abs=1e-12)

    def test_energy_conservation_random_orthonormal(self):
        rng = np.random.default_rng(0)
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
        pa = PowerAllocation((0.1, 0.2, 0.3, 0.4))
        s = QPSK_POINTS[rng.integers(0, 4, 4)]
        x = superpose(s, pa, Q.T)
        assert np.vdot(x, x).real == pytest.approx(1.0, abs=1e-12)

    def test_mean_energy(self):
        rng = SeededRng(3)
        pa = PowerAllocation((0.8, 0.2))
        W = mrt_precoders(draw_complex_gaussian(rng, (2, 4)))
        s = random_qpsk(rng, (2, 50_000))
        x = superpose(s, pa, W)
        assert np.mean(np.sum(np.abs(x) ** 2, axis=0)) == pytest.approx(1.0, rel=0.02)

    def test_precoders_unit_norm(self):
        W = mrt_precoders(draw_complex_gaussian(SeededRng(1), (3, 4)))
        np.testing.assert_allclose(np.linalg.norm(W, axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            superpose([1, 1], PowerAllocation((1.0,)), [[1, 0]])


class TestReceive:
    def test_noiseless(self):
        assert receive([1, 0], [1, 0], SeededRng(0), 0.0) == 1

    def test_zero_channel_is_noise(self):
        y = receive(np.ones((2, 10)), [0, 0], SeededRng(1), 0.5)
        ref = SeededRng(1)
        from noma_deepsic.numerics import draw_complex_gaussian as dcg
        np.testing.assert_allclose(y, dcg(ref, (10,), 0.5))

    def test_noise_variance(self):
        h = np.array([0.3 + 0.1j, -0.2j])
        x = np.ones((2, 100_000))
        y = receive(x, h, SeededRng(2), 0.1)
        n = y - h.conj() @ x
        assert 0.098 <= np.var(n) <= 0.102


class TestLLR:
    def test_vanishing_noise(self):
        for i, s in enumerate(QPSK_POINTS):
            l0, l1 = qpsk_llr(0.9 * s, 0.9, 1.0, 1e-4)
            bits = qpsk_to_bits([s])[0]
            assert (l0 > 0) == bool(bits[0]) and (l1 > 0) == bool(bits[1])
            assert min(abs(l0), abs(l1)) > 100

    def test_origin(self):
        assert qpsk_llr(0.0, 1.0, 1.0, 0.3) == (0.0, 0.0)

    def test_brute_force(self):
        got = qpsk_llr(0.3 + 0.1j, 1.0, 1.0, 0.5)
        want = brute_force_llr(0.3 + 0.1j, 1.0, 1.0, 0.5)
        assert got == pytest.approx(want, abs=1e-12)

    def test_brute_force_complex_gain(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            y = complex(*rng.standard_normal(2))
            g = complex(*rng.standard_normal(2))
            a, var = rng.uniform(0.2, 2), rng.uniform(0.1, 2)
            assert qpsk_llr(y, g, a, var) == pytest.approx(brute_force_llr(y, g, a, var), abs=1e-10)

    def test_bit_mapping_round_trip(self):
        bits = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
        np.testing.assert_array_equal(qpsk_to_bits(bits_to_qpsk(bits)), bits)


class TestSic:
    def test_perfect_cancellation(self):
        pa = PowerAllocation((0.2, 0.8))  # user 0 strong channel, low power
        g = np.array([1.2 - 0.3j, 1.1 + 0.2j])
        s = QPSK_POINTS[[2, 1]]
        y = sum(g[k] * math.sqrt(pa.powers[k]) * s[k] for k in range(2))
        res = sic_decode(y, g, pa, [1, 0], 0.0, truth=s)
        assert res.pdd_residual[0] == 0 and res.pdd_residual[1] == 0
        assert res.post_cancel_signal == pytest.approx(g[0] * math.sqrt(0.2) * s[0], abs=1e-15)
        assert res.stage_order == [1, 0]

    def test_forced_wrong_decision(self):
        pa = PowerAllocation((0.2, 0.8))
        s2 = (1 + 1j) / math.sqrt(2)
        s = np.array([QPSK_POINTS[0], s2])
        y = math.sqrt(0.2) * s[0] + math.sqrt(0.8) * s[1]
        res = sic_decode(y, [1.0, 1.0], pa, [1, 0], 0.01, truth=s, forced={1: -s2})
        assert res.pdd_residual[1] == pytest.approx((2 + 2j) / math.sqrt(2))
        assert abs(res.pdd_residual[1]) == pytest.approx(2.0)

    def test_no_truth_no_residual(self):
        res = sic_decode(0.5, [1.0], PowerAllocation((1.0,)), [0], 0.1)
        assert res.pdd_residual is None

    def test_empty_order(self):
        with pytest.raises(EmptyOrder):
            sic_decode(0.5, [1.0], PowerAllocation((1.0,)), [], 0.1)

    def test_llr_sign_matches_decision(self):
        rng = SeededRng(6)
        pa = PowerAllocation((0.2, 0.8))
        s = random_qpsk(rng, (2, 2000))
        y = np.sqrt(0.2) * s[0] + np.sqrt(0.8) * s[1] + draw_complex_gaussian(rng, 2000, 0.05)
        res = sic_decode(y, [1.0, 1.0], pa, [1, 0], 0.05, truth=s)
        for k in (0, 1):
            bits = qpsk_to_bits(res.decoded_symbols[k])
            l0, l1 = res.llr[k]
            assert np.array_equal(bits[:, 0] == 1, l0 > 0)
            assert np.array_equal(bits[:, 1] == 1, l1 > 0)

    def test_stage_one_matches_joint_ml(self):
        # joint maximum-likelihood over all 16 symbol pairs on the same noise
        rng = SeededRng(7)
        n = 100_000
        pa = PowerAllocation((0.8, 0.2))
        s = random_qpsk(rng, (2, n))
        y = np.sqrt(0.8) * s[0] + np.sqrt(0.2) * s[1] + draw_complex_gaussian(rng, n, 0.05)
        res = sic_decode(y, [1.0, 1.0], pa, [0, 1], 0.05, truth=s)
        pairs = np.array([(a, b) for a in QPSK_POINTS for b in QPSK_POINTS])
        cand = np.sqrt(0.8) * pairs[:, 0] + np.sqrt(0.2) * pairs[:, 1]
        ml = pairs[np.argmin(np.abs(y[:, None] - cand[None, :]), axis=1), 0]
        truth_bits = qpsk_to_bits(s[0])
        ber_sic = ber_measure(truth_bits, qpsk_to_bits(res.decoded_symbols[0]))
        ber_ml = ber_measure(truth_bits, qpsk_to_bits(ml))
        assert abs(ber_sic - ber_ml) <= 0.001

    def test_pdd_grows_with_estimate_error(self):
        rng = SeededRng(8)
        n = 10_000
        pa = PowerAllocation((0.2, 0.8))
        g = np.array([1.0, 0.8])
        s = random_qpsk(rng, (2, n))
        noise = draw_complex_gaussian(rng, n, 0.02)
        y = g[0] * np.sqrt(0.2) * s[0] + g[1] * np.sqrt(0.8) * s[1] + noise
        direction = draw_complex_gaussian(SeededRng(9), 2, 1.0)
        direction /= np.linalg.norm(direction)
        scores = []
        for err in (0.1, 0.2, 0.3, 0.4, 0.5):
            res = sic_decode(y, g + err * direction, pa, [1, 0], 0.02, truth=s)
            scores.append(np.mean(np.abs(res.pdd_residual[0]) ** 2 + np.abs(res.pdd_residual[1]) ** 2))
        assert np.all(np.diff(scores) > 0)

    def test_ber_log_shape_perfect_csi(self):
        rng = SeededRng(10)
        n = 200_000
        snrs = np.arange(0, 11, 2)
        bers = []
        s = random_qpsk(rng, n)
        base = draw_complex_gaussian(rng, n, 1.0)
        for snr_db in snrs:
            var = 10 ** (-snr_db / 10)
            y = s + math.sqrt(var) * base
            d = sic_decode(y, [1.0], PowerAllocation((1.0,)), [0], var).decoded_symbols[0]
            bers.append(ber_measure(qpsk_to_bits(s), qpsk_to_bits(d)))
        logb = np.log(bers)
        assert np.all(np.diff(logb) < 0)
        # slope steepens (concave-down in dB) as the exponential regime sets in
        assert np.all(np.diff(logb, 2) < 0.05)


class TestBerAndPdd:
    def test_identical(self):
        assert ber_measure([0, 1, 1], [0, 1, 1]) == 0.0

    def test_complement(self):
        assert ber_measure([0, 1, 1], [1, 0, 0]) == 1.0

    def test_planted_flips(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 2, 1000)
        b = a.copy()
        idx = rng.choice(1000, 37, replace=False)
        b[idx] ^= 1
        assert ber_measure(a, b) == pytest.approx(0.037)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ber_measure([0, 1], [0])

    def test_reliability_zero(self):
        assert pdd_reliability(np.zeros(8), 4).score == 0.0

    def test_soft_residual_shrinks_with_reliability(self):
        d = np.array([QPSK_POINTS[3]] * 3)
        r = soft_pdd_residual(d, np.array([0.0, 2.0, 40.0]), np.array([0.0, 2.0, 40.0]))
        mags = np.abs(r)
        assert mags[0] == pytest.approx(1.0) and mags[0] > mags[1] > mags[2]
        assert mags[2] < 1e-8
