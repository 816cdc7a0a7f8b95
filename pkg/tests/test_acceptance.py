"""Acceptance gate: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""

import json
import math
import time

import numpy as np
import pytest

from noma_deepsic.cli import complexity_counts, complexity_fits, replay, run_scenario
from noma_deepsic.config import SCENARIOS, RunConfig, apply_overrides
from noma_deepsic.estimation import (
    dft_pilots,
    ls_estimate,
    mmse_estimate,
    pdd_corrected_update,
    pilot_autocorrelation,
    start_refinement,
)
from noma_deepsic.handover import HandoverConfig, SweepConfig, pingpong_comparison, run_mobility_sweep
from noma_deepsic.metrics import (
    fit_theorem1_bound,
    mase,
    mobility_bound_curve,
    mse,
    nrmse,
    pilot_scaling_slope,
    r_squared,
    theorem2_tracking_bound,
    theorem3_nrmse_bound,
)
from noma_deepsic.numerics import SeededRng, draw_complex_gaussian
from noma_deepsic.pipeline import DeepSicConfig, build_dataset, complex_to_real, fit_refiner
from noma_deepsic.transformer import (
    TransformerConfig,
    TransformerModel,
    complexity_per_sequence,
    is_head_param,
    train,
)

VELOCITIES = (0, 30, 60, 90, 120)
CI_HALF_WIDTH = 0.03


def acceptance(n, text):
    return pytest.mark.acceptance(n, text)


# ---------------------------------------------------------------------- 1

@acceptance(1, "transformer gradients match central differences (rel < 1e-4, d_model=8, T=5, < 30 s)")
def test_gradient_correctness():
    t0 = time.perf_counter()
    cfg = TransformerConfig(seq_len=5, d_model=8, n_heads=2, n_layers=2, d_out=2, seed=3)
    m = TransformerModel(cfg)
    g = SeededRng(3, 1).gen
    for name, p in m.params.items():
        if is_head_param(name) or name.endswith(("_b", "_g")):
            m.params[name] = p + 0.3 * g.standard_normal(p.shape)
    X, Y = g.standard_normal((3, 5, 4)), g.standard_normal((3, 2))
    worst = {}
    for name, p in m.params.items():
        m.loss_and_grads(X, Y)
        analytic = m.grads[name].copy()
        coords = g.choice(p.size, size=min(p.size, 100), replace=False)
        w = 0.0
        for flat in coords:
            idx = np.unravel_index(flat, p.shape)
            old = p[idx]
            p[idx] = old + 1e-5
            lp = m.loss_and_grads(X, Y)
            p[idx] = old - 1e-5
            lm = m.loss_and_grads(X, Y)
            p[idx] = old
            num = (lp - lm) / 2e-5
            w = max(w, abs(num - analytic[idx]) / max(abs(num), abs(analytic[idx]), 1e-6))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    print(f"max rel error {max(worst.values()):.2e} over {len(worst)} tensors in {elapsed:.1f} s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 30


# ---------------------------------------------------------------------- 2

def _instance(i):
    # shaped like the refinement system: n_pilot + n_data rows, one column per antenna
    rng = SeededRng(2024, i)
    J = draw_complex_gaussian(rng, (36, 4))
    y = draw_complex_gaussian(rng, 36)
    e_pdd = 0.05 * draw_complex_gaussian(rng, 36)
    return J, y, e_pdd


@acceptance(2, "certified refinement: linear log-error decay (R2 >= 0.99), step inequality, 1.1x witness")
def test_contraction():
    r2_min, violations, witnesses = 1.0, 0, 0
    for i in range(100):
        J, y, e_pdd = _instance(i)
        h_star = np.linalg.lstsq(J, y, rcond=None)[0]
        state, cert = start_refinement(np.zeros(4), J)
        assert cert.certified
        err = [np.linalg.norm(state.h - h_star)]
        for _ in range(200):
            state = pdd_corrected_update(state, y, J)
            err.append(np.linalg.norm(state.h - h_star))
        err = np.array(err)
        keep = err > 1e-10 * err[0]
        t, le = np.arange(err.size)[keep], np.log(err[keep])
        fit = np.polyval(np.polyfit(t, le, 1), t)
        r2_min = min(r2_min, 1 - np.sum((le - fit) ** 2) / np.sum((le - le.mean()) ** 2))

        # step inequality with a PDD term of norm eps (weight 1)
        eps = np.linalg.norm(J.conj().T @ e_pdd)
        state, _ = start_refinement(np.zeros(4), J)
        prev = np.linalg.norm(state.h - h_star)
        for _ in range(60):
            state = pdd_corrected_update(state, y, J, e_pdd=e_pdd)
            cur = np.linalg.norm(state.h - h_star)
            violations += cur > cert.contraction_factor * prev + state.eta * eps + 1e-12
            prev = cur

        state, bad = start_refinement(np.zeros(4), J, eta=1.1 * cert.eta_bound)
        assert not bad.certified
        prev, grew = np.linalg.norm(state.h - h_star), False
        for _ in range(30):
            state = pdd_corrected_update(state, y, J, override=True)
            cur = np.linalg.norm(state.h - h_star)
            grew |= cur > prev
            prev = cur
        witnesses += grew
    print(f"min R2 {r2_min:.4f}, inequality violations {violations}, non-contracting at 1.1x: {witnesses}/100")
    assert r2_min >= 0.99
    assert violations == 0
    assert witnesses >= 1


# ---------------------------------------------------------------------- 3

@acceptance(3, "MMSE scalar reduction to 1e-12 and MMSE <= LS (2% tolerance) at -5/0/5/10 dB")
def test_mmse_fidelity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y, n = complex(*rng.standard_normal(2)), float(rng.uniform(0, 3))
        assert abs(mmse_estimate([y], [1.0], 1.0, 1.0, n)[0] - y / (1 + n)) < 1e-12
    s = dft_pilots(1, 4).row(0)
    Rss = pilot_autocorrelation(s)
    for snr in (-5, 0, 5, 10):
        var = 10 ** (-snr / 10)
        r = SeededRng(300 + snr + 5)
        h = draw_complex_gaussian(r, 10_000)
        Y = h[:, None] * s[None, :] + draw_complex_gaussian(r, (10_000, 4), var)
        ls = np.array([ls_estimate(v, s) for v in Y])
        mm = np.array([mmse_estimate(v, s, 1.0, Rss, var)[0] for v in Y])
        a, b = np.mean(np.abs(ls - h) ** 2), np.mean(np.abs(mm - h) ** 2)
        print(f"{snr:>3} dB  LS {a:.4f}  MMSE {b:.4f}")
        assert b <= a * 1.02


# ---------------------------------------------------------------------- 4

@acceptance(4, "PDD lowers final NRMSE by >= 5% at 0 dB (200 paired windows) and raises R2")
def test_pdd_benefit():
    cfg = DeepSicConfig(snr_db=0.0)
    out = {}
    for name, c in (("pdd", cfg), ("no_pdd", cfg.without_pdd())):
        tr = build_dataset(c, 300, seed=1, stream=0)
        te = build_dataset(c, 200, seed=1, stream=1)
        pred = fit_refiner(tr).predict(te)
        p, a = complex_to_real(pred), complex_to_real(te.truth)
        out[name] = (nrmse(p, a), r_squared(p, a))
    print(f"NRMSE with {out['pdd'][0]:.4f} without {out['no_pdd'][0]:.4f}; "
          f"R2 with {out['pdd'][1]:.4f} without {out['no_pdd'][1]:.4f}")
    assert out["pdd"][0] <= 0.95 * out["no_pdd"][0]
    assert out["pdd"][1] > out["no_pdd"][1]


# ---------------------------------------------------------------------- 5

@pytest.fixture(scope="module")
def sweep_rows():
    rows = run_mobility_sweep(VELOCITIES, 500, SweepConfig(), SeededRng(2026))
    return {(r.velocity_kmh, r.policy): r for r in rows}


@acceptance(5, "handover: pure-CSI HOF non-decreasing in v; fewer ping-pongs with PDD; PDD HOF <= no-PDD at v >= 60")
def test_handover_claims(sweep_rows):
    pure = [sweep_rows[(float(v), "pure_csi")].hof_rate for v in VELOCITIES]
    print("pure-CSI HOF rate:", " ".join(f"{v}:{r:.3f}" for v, r in zip(VELOCITIES, pure)))
    # (a) within the binomial CI half-width
    assert all(b >= a - CI_HALF_WIDTH for a, b in zip(pure, pure[1:]))
    assert pure[-1] > pure[0] + CI_HALF_WIDTH

    # (b)
    pp = pingpong_comparison(500, HandoverConfig(), SeededRng(2027))
    print(f"ping-pongs alpha=0: {pp.baseline.sum()}, alpha=0.5: {pp.pdd.sum()}, p = {pp.p_value:.2e}")
    assert pp.pdd.sum() < pp.baseline.sum() and pp.p_value < 0.01

    # (c) paired trials, same CI half-width
    for v in (60, 90, 120):
        w = sweep_rows[(float(v), "deepsic_pdd")].hof_rate
        wo = sweep_rows[(float(v), "deepsic_no_pdd")].hof_rate
        print(f"{v} km/h HOF with PDD {w:.3f} without {wo:.3f}")
        assert w <= wo + CI_HALF_WIDTH


# ---------------------------------------------------------------------- 6

@acceptance(6, "FLOPs linear in K for per-user Deep-SIC (R2 >= 0.99), quadratic for joint attention; epoch law within 5%")
def test_complexity_law():
    rows = complexity_counts(range(1, 9), TransformerConfig(d_out=2))
    fits = complexity_fits(rows)
    print(json.dumps(fits, sort_keys=True))
    assert fits["per_user_r2"] >= 0.99
    assert fits["joint_quadratic_coef"] > 0
    assert fits["joint_quadratic_sse"] < 1e-6 * fits["joint_linear_sse"]

    m = TransformerModel(TransformerConfig(seq_len=10, d_model=32, d_ff=128, d_out=1, n_layers=1))
    m.forward(np.zeros((1, 10, 4)))
    assert m.flop_counter == 44_192
    for T, D in ((5, 8), (10, 16), (8, 32)):
        cfg = TransformerConfig(seq_len=T, d_model=D, n_layers=1, d_out=1)
        counts = []
        for S in (4, 8, 16):
            model = TransformerModel(cfg)
            train(model, np.zeros((S, T, 4)), np.zeros(S), epochs=1, eta=1e-3)
            counts.append(model.flop_counter)
        slope = np.polyfit([4, 8, 16], counts, 1)[0]
        expect = complexity_per_sequence(T, D, cfg.d_ff, 1)
        assert abs(slope - expect) / expect < 0.05


# ---------------------------------------------------------------------- 7

@acceptance(7, "metric golden values to 1e-12 and nrmse^2 sigma^2 = mse")
def test_metric_golden():
    assert abs(nrmse([2, 2, 2], [1, 2, 3]) - 1.0) < 1e-12
    assert abs(mase([0, 1, 2, 4], [0, 1, 2, 3]) - 4 / 3) < 1e-12
    assert abs(mse(np.arange(4) + 0.5, np.arange(4)) - 0.25) < 1e-12
    assert abs(r_squared([3, 2, 1], [1, 2, 3]) + 3.0) < 1e-12
    rng = np.random.default_rng(7)
    for _ in range(50):
        p, a = rng.normal(size=20), rng.normal(size=20)
        assert abs(nrmse(p, a) ** 2 * np.std(a) ** 2 - mse(p, a)) < 1e-12


# ---------------------------------------------------------------------- 8

@acceptance(8, "bound evaluators: 0.1211, 2.0, C=0.5 recovery, gamma within 10%, pilot slope 1.5 +- 0.15")
def test_bound_evaluators():
    t2 = theorem2_tracking_bound(1.0, 60 / 3.6, 0.15, 1e-3, 1.0, 0.01)
    assert abs(t2 - 0.1211) < 1e-4
    assert mobility_bound_curve(1.0, 2.0, 3.0, [0.0]).samples[0][1] == pytest.approx(2.0, abs=1e-12)
    T, S = np.array([5, 10, 20, 50]), np.array([10, 30, 100])
    c = theorem3_nrmse_bound(0.5 * np.sqrt(1 / T[:, None] + 1 / S[None, :]), T, S).c
    assert abs(c - 0.5) < 1e-9
    Ts = np.arange(100)
    fit = fit_theorem1_bound(Ts, 5 * np.exp(-0.1 * Ts) + 0.02, 4, 8, 0.01, 10.0)
    assert abs(fit.gamma - 0.1) <= 0.01
    slope = pilot_scaling_slope(fit.c2)
    print(f"theorem2 {t2:.4f}, C {c:.12f}, gamma {fit.gamma:.4f}, pilot slope {slope:.3f}")
    assert abs(slope - 1.5) <= 0.15


# ---------------------------------------------------------------------- 9

@pytest.fixture(scope="module")
def scenario_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("scenarios")
    runs = {}
    for name in SCENARIOS:
        cfg = apply_overrides(RunConfig(), {"run.scenario": name, "run.seed": 11})
        t0 = time.perf_counter()
        run_scenario(cfg, base / name)
        runs[name] = (base / name, time.perf_counter() - t0)
    return runs


@acceptance(9, "every default scenario replays bit-exactly from its manifest")
def test_determinism(scenario_runs, tmp_path):
    for name, (out, secs) in scenario_runs.items():
        ok, detail = replay(out / "manifest.json", tmp_path / name)
        print(f"{name:<17} {secs:6.1f} s  {'identical' if ok else detail}")
        assert ok, (name, detail)


@acceptance(10, "default scenarios each finish within 5 minutes (suite total checked at session end)")
def test_scenario_budget(scenario_runs):
    for name, (_, secs) in scenario_runs.items():
        assert secs < 300, name
    theory = json.loads((scenario_runs["theory-check"][0] / "theory_report.json").read_text())
    assert theory["bounds"]["proposition1"]["certified"] is True
    assert not math.isnan(theory["bounds"]["theorem2"])
