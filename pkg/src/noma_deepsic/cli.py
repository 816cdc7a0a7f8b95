"""Command-line runner: one subcommand per scenario plus manifest replay.

Every scenario writes its artifacts and a ``manifest.json`` holding the
effective configuration, sha256 checksums of the artifacts, versions and
wall-clock time. ``replay`` re-runs a manifest and compares checksums.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy
from joblib import Parallel, delayed

from . import __version__
from .config import SCENARIOS, ConfigValueError, RunConfig, UnknownKey, apply_overrides, config_from_dict, parse_config
from .estimation import start_refinement
from .handover import POLICIES, SweepConfig, draw_crossing, policy_scores, run_mobility_sweep, run_trace, write_sweep_csv
from .metrics import (
    NonMonotoneSeries,
    fit_theorem1_bound,
    lemma1_ber_ratio,
    metric_report,
    mobility_bound_curve,
    nrmse,
    pilot_scaling_slope,
    theorem2_tracking_bound,
    theorem3_nrmse_bound,
    write_report,
)
from .numerics import SeededRng
from .pipeline import (
    DeepSicConfig,
    Refiner,
    ber_comparison,
    build_dataset,
    complex_to_real,
    draw_window,
    fit_refiner,
    slot_initial_estimate,
    slot_system,
)
from .transformer import Standardizer, TransformerConfig, TransformerModel, train, transfer_fit

MANIFEST = "manifest.json"
DEFAULT_TRIALS = {
    "estimate": 50,
    "train": 200,
    "transfer": 200,
    "handover-sweep": 500,
    "complexity-sweep": 1,
    "theory-check": 200,
}


class CertificationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------- helpers

def trials_of(cfg: RunConfig) -> int:
    return cfg.run.trials or DEFAULT_TRIALS[cfg.scenario]


def deepsic_config(cfg: RunConfig, snr_db: float | None = None, use_pdd: bool = True) -> DeepSicConfig:
    n = cfg.noma
    return DeepSicConfig(
        snr_db=n.snr_db if snr_db is None else snr_db,
        n_pilot=n.n_pilot,
        n_data=n.n_data,
        powers=tuple(n.powers),
        window=cfg.transformer.seq_len,
        refine_iters=n.refine_iters,
        outer_rounds=n.outer_rounds,
        use_pdd=use_pdd,
        channel=cfg.channel,
    )


def refiner_config(cfg: RunConfig) -> TransformerConfig:
    return dataclasses.replace(cfg.transformer, d_out=2, input_features=4)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    return {"noma_deepsic": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _nrmse_complex(est, truth) -> float:
    return nrmse(complex_to_real(est), complex_to_real(truth))


# ---------------------------------------------------------------------- scenarios

def scenario_estimate(cfg: RunConfig, out: Path) -> dict:
    """Per-SNR NRMSE of the MMSE start and the refined estimate with and without PDD."""
    n = trials_of(cfg)
    rows = []
    for i, snr in enumerate(cfg.estimate.snr_grid):
        with_pdd = build_dataset(deepsic_config(cfg, snr), n, cfg.seed, stream=i)
        without = build_dataset(deepsic_config(cfg, snr, use_pdd=False), n, cfg.seed, stream=i)
        rows.append([_fmt(snr), n, _fmt(_nrmse_complex(with_pdd.initial, with_pdd.truth)),
                     _fmt(_nrmse_complex(without.refined, without.truth)),
                     _fmt(_nrmse_complex(with_pdd.refined, with_pdd.truth)),
                     int(with_pdd.certified and without.certified)])
    _write_csv(out / "estimate_nrmse.csv",
               ["snr_db", "windows", "nrmse_mmse", "nrmse_no_pdd", "nrmse_pdd", "certified"], rows)
    if cfg.run.strict and not all(r[-1] for r in rows):
        raise CertificationFailed("refinement step size not certified on every slot")
    return {"rows": len(rows)}


def scenario_train(cfg: RunConfig, out: Path) -> dict:
    ds = build_dataset(deepsic_config(cfg), trials_of(cfg), cfg.seed)
    st = Standardizer.fit(ds.X)
    model = TransformerModel(refiner_config(cfg), st)
    log = train(model, st.transform(ds.X), ds.residual_targets, epochs=cfg.estimate.epochs)
    log.write_csv(out / "loss_curve.csv")
    model.save(out / "checkpoint.json")
    return {"final_loss": log.rows[-1][1]}


def scenario_transfer(cfg: RunConfig, out: Path) -> dict:
    """Backbone trained at the source SNR, head refit at the target SNR."""
    n = trials_of(cfg)
    src = build_dataset(deepsic_config(cfg, cfg.estimate.source_snr_db), n, cfg.seed, stream=0)
    tgt = build_dataset(deepsic_config(cfg), n, cfg.seed, stream=1)
    test = build_dataset(deepsic_config(cfg), max(n // 2, 2), cfg.seed, stream=2)
    ref = fit_refiner(src, epochs=cfg.estimate.epochs, tcfg=refiner_config(cfg))
    model = ref.model
    model.frozen = True
    transfer_fit(model, model.standardizer.transform(tgt.X), tgt.residual_targets, max_steps=2000)
    pred = Refiner(model).predict(test)
    report = metric_report(complex_to_real(pred), complex_to_real(test.truth))
    baseline = metric_report(complex_to_real(test.refined), complex_to_real(test.truth))
    write_report(out / "transfer_report.json", report, refined_baseline=baseline)
    return {"nrmse": report.nrmse}


def _sweep_velocity(i: int, v: float, trials: int, scfg: SweepConfig, seed: int):
    rows = run_mobility_sweep([v], trials, scfg, SeededRng(seed).child(i))
    # representative event log from a separate single-trial draw
    draw = draw_crossing(scfg, v, 1, SeededRng(seed).child(i, 1))
    events = []
    for policy in POLICIES:
        scores, snr = policy_scores(draw, scfg, policy)
        for e in run_trace(scores[0], scfg.handover, snr[0]).events:
            events.append(dict(velocity_kmh=v, policy=policy, **dataclasses.asdict(e)))
    return rows, events


def sweep_config(cfg: RunConfig) -> SweepConfig:
    s = cfg.sweep
    return SweepConfig(handover=cfg.handover, channel=cfg.channel, estimate_delay=s.estimate_delay,
                       filter_steps=s.filter_steps, pdd_filter_steps=s.pdd_filter_steps)


def scenario_handover(cfg: RunConfig, out: Path) -> dict:
    scfg = sweep_config(cfg)
    vs = [float(v) for v in cfg.sweep.velocities]
    # the calibration is cached per process; compute it once before fanning out
    scfg = dataclasses.replace(scfg, error_scale=tuple(sorted(
        {p: scfg.scale_for(p) for p in POLICIES}.items())))
    jobs = Parallel(n_jobs=cfg.run.jobs)(
        delayed(_sweep_velocity)(i, v, trials_of(cfg), scfg, cfg.seed) for i, v in enumerate(vs))
    rows = [r for part, _ in jobs for r in part]
    write_sweep_csv(rows, out / "handover_sweep.csv")
    with open(out / "handover_events.ndjson", "w") as fh:
        for _, events in jobs:
            for e in events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    return {"rows": len(rows)}


def complexity_counts(k_values, tcfg: TransformerConfig, seed: int = 0):
    """Measured dominant-term FLOPs of one forward pass per configuration.

    Per-user Deep-SIC runs one ``T``-token sequence per user; the joint
    variant attends over all ``K * T`` tokens in a single sequence.
    """
    T, F = tcfg.seq_len, tcfg.input_features
    rows = []
    for k in k_values:
        X = SeededRng(seed).child(k).gen.standard_normal((k, T, F))
        per_user = TransformerModel(tcfg)
        per_user.forward(X)
        joint = TransformerModel(dataclasses.replace(tcfg, seq_len=k * T))
        joint.forward(X.reshape(1, k * T, F))
        rows.append((k, per_user.flop_counter, joint.flop_counter))
    return rows


def complexity_fits(rows) -> dict:
    K = np.array([r[0] for r in rows], dtype=float)
    per_user = np.array([r[1] for r in rows], dtype=float)
    joint = np.array([r[2] for r in rows], dtype=float)
    lin = np.polyfit(K, per_user, 1)
    resid = per_user - np.polyval(lin, K)
    ss = np.sum((per_user - per_user.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / ss) if ss > 0 else 1.0
    out = {"per_user_slope": float(lin[0]), "per_user_r2": r2, "joint_quadratic_coef": None,
           "joint_linear_sse": None, "joint_quadratic_sse": None}
    if K.size >= 3:
        quad = np.polyfit(K, joint, 2)
        lin_joint = np.polyfit(K, joint, 1)
        out["joint_quadratic_coef"] = float(quad[0])
        out["joint_linear_sse"] = float(np.sum((joint - np.polyval(lin_joint, K)) ** 2))
        out["joint_quadratic_sse"] = float(np.sum((joint - np.polyval(quad, K)) ** 2))
    return out


def scenario_complexity(cfg: RunConfig, out: Path) -> dict:
    c = cfg.complexity
    rows = complexity_counts(range(c.k_min, c.k_max + 1), refiner_config(cfg), cfg.seed)
    _write_csv(out / "complexity.csv", ["K", "deepsic_flops", "joint_attention_flops"], rows)
    fits = complexity_fits(rows)
    with open(out / "complexity_fit.json", "w") as fh:
        json.dump(fits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return fits


def _theorem1_series(cfg: RunConfig, n_slots: int, iters: int = 60):
    dcfg = dataclasses.replace(deepsic_config(cfg), window=1, use_pdd=True)
    root = SeededRng(cfg.seed, 41)
    err = np.zeros(iters + 1)
    ber = llr_norm = grad = 0.0
    cert = None
    for i in range(n_slots):
        d = draw_window(dcfg, root.child(i))[0]
        g0 = slot_initial_estimate(d, dcfg)
        sys_ = slot_system(d, dcfg, g0)
        beta = float(np.sum(sys_.flags * np.abs(sys_.J[:, 0]) ** 2))
        state, _ = start_refinement(np.array([g0]), sys_.J)
        if i == 0:
            cert = start_refinement(np.array([g0]), sys_.J, beta=beta)[1]
        h = state.h[0]
        J = sys_.J[:, 0]
        err[0] += abs(h - d.gain) ** 2
        e_pdd = sys_.flags * (sys_.y - J * g0)
        grad += float(np.linalg.norm(J.conj() @ e_pdd))
        for t in range(iters):
            h = h - state.eta * np.vdot(J, J * h - sys_.y)
            err[t + 1] += abs(h - d.gain) ** 2
        ber += sys_.ber_own
        llr_norm += float(np.linalg.norm(sys_.llr))
    n = float(n_slots)
    return err / n, ber / n, llr_norm / n, grad / n, cert


def _theorem3_grid(cfg: RunConfig):
    T_vals, S_vals = (2, 4, 8), (20, 40, 80)
    grid = np.zeros((3, 3))
    for i, T in enumerate(T_vals):
        dcfg = dataclasses.replace(deepsic_config(cfg), window=T)
        test = build_dataset(dcfg, 60, cfg.seed, stream=900 + T)
        train_all = build_dataset(dcfg, max(S_vals), cfg.seed, stream=800 + T)
        for j, S in enumerate(S_vals):
            sub = dataclasses.replace(train_all, X=train_all.X[:S], truth=train_all.truth[:S],
                                      refined=train_all.refined[:S], initial=train_all.initial[:S],
                                      ber_own=train_all.ber_own[:S])
            tcfg = dataclasses.replace(refiner_config(cfg), seq_len=T, d_model=16, n_layers=1)
            ref = fit_refiner(sub, epochs=40, tcfg=tcfg)
            grid[i, j] = _nrmse_complex(ref.predict(test), test.truth)
    return grid, T_vals, S_vals


def scenario_theory(cfg: RunConfig, out: Path) -> dict:
    n = trials_of(cfg)
    dcfg = deepsic_config(cfg)
    series, ber, llr_norm, grad, cert = _theorem1_series(cfg, n)
    T = np.arange(series.size)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonMonotoneSeries)
        t1 = fit_theorem1_bound(T, series, K=len(dcfg.powers), n_pilot=dcfg.n_pilot, ber=ber,
                                llr_norm=llr_norm)
    slope = pilot_scaling_slope(t1.c2) if t1.c2 > 0 else float("nan")
    ch = cfg.channel
    t2 = theorem2_tracking_bound(1.0, ch.velocity_kmh / 3.6, ch.carrier_wavelength, ch.step_duration,
                                 cert.eta, grad)
    grid, T_vals, S_vals = _theorem3_grid(cfg)
    t3 = theorem3_nrmse_bound(grid, T_vals, S_vals)
    lemma = []
    for i, snr in enumerate((-3.0, 0.0, 3.0, 6.0, 9.0)):
        b = ber_comparison(deepsic_config(cfg, snr), n, cfg.seed, stream=60 + i)
        obs, shape = lemma1_ber_ratio(max(b.ber_base, 1e-12), max(b.ber_deepsic, 1e-12),
                                      b.gain_deepsic_sq, b.gain_base_sq, b.noise_variance)
        lemma.append({"snr_db": snr, "observed_ratio": obs, "predicted_shape": shape})
    curve = mobility_bound_curve(1.0, 2.0, 3.0, np.linspace(0.0, 10.0, 21))
    write_report(
        out / "theory_report.json",
        None,
        proposition1={"lambda_max": cert.lambda_max, "eta": cert.eta, "eta_bound": cert.eta_bound,
                      "contraction_factor": cert.contraction_factor, "certified": cert.certified},
        theorem1=dict(dataclasses.asdict(t1), mse_series=series.tolist(), pilot_scaling_slope=slope,
                      non_monotone=any(issubclass(w.category, NonMonotoneSeries) for w in caught)),
        theorem2=t2,
        theorem3={"c": t3.c, "violations": [list(v) for v in t3.violations], "grid": grid.tolist(),
                  "T": list(T_vals), "S": list(S_vals)},
        lemma1=lemma,
        mobility_curve=curve.samples,
    )
    if cfg.run.strict and not cert.certified:
        raise CertificationFailed("step size of the refinement is not certified")
    return {"certified": cert.certified}


RUNNERS = {
    "estimate": scenario_estimate,
    "train": scenario_train,
    "transfer": scenario_transfer,
    "handover-sweep": scenario_handover,
    "complexity-sweep": scenario_complexity,
    "theory-check": scenario_theory,
}


def run_scenario(cfg: RunConfig, out: Path | None = None) -> dict:
    """Run ``cfg.scenario`` into ``out`` and write the manifest; returns it."""
    out = Path(out) if out is not None else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = RUNNERS[cfg.scenario](cfg, out)
    manifest = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "artifacts": {name: sha256_file(out / name) for name in ARTIFACTS[cfg.scenario]},
        "summary": summary,
        "versions": versions(),
        "wall_clock_s": time.perf_counter() - t0,
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return manifest


ARTIFACTS = {
    "estimate": ("estimate_nrmse.csv",),
    "train": ("loss_curve.csv", "checkpoint.json"),
    "transfer": ("transfer_report.json",),
    "handover-sweep": ("handover_sweep.csv", "handover_events.ndjson"),
    "complexity-sweep": ("complexity.csv", "complexity_fit.json"),
    "theory-check": ("theory_report.json",),
}


def replay(manifest_path, out: Path) -> tuple[bool, dict]:
    """Re-run a manifest into ``out``; returns (all checksums equal, per-file result)."""
    m = json.loads(Path(manifest_path).read_text())
    cfg = config_from_dict(m["config"])
    new = run_scenario(cfg, out)
    result = {name: new["artifacts"].get(name) == digest for name, digest in m["artifacts"].items()}
    return all(result.values()) and bool(result), result


# ---------------------------------------------------------------------- argument parsing

def _k_range(text: str) -> tuple[int, int]:
    if ".." in text:
        a, b = text.split("..", 1)
        return int(a), int(b)
    return 1, int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noma-deepsic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--strict", action="store_true", help="nonzero exit on a failed certification")
    common.add_argument("--output-dir", type=Path)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration key")
    for name in SCENARIOS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("estimate", "train", "transfer"):
            sp.add_argument("--snr-db", type=float, nargs="+")
            sp.add_argument("--epochs", type=int)
        if name == "handover-sweep":
            sp.add_argument("--velocities", type=float, nargs="+")
        if name == "complexity-sweep":
            sp.add_argument("--k", type=_k_range, help="range such as 1..8")
    rp = sub.add_parser("replay", help="re-run a manifest and compare checksums")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--output-dir", type=Path, required=True)
    return p


def config_from_args(args) -> RunConfig:
    over: dict = {"run.scenario": args.command}
    for item in args.set:
        if "=" not in item:
            raise ConfigValueError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v
    if args.seed is not None:
        over["run.seed"] = args.seed
    if args.trials is not None:
        over["run.trials"] = args.trials
    if args.jobs is not None:
        over["run.jobs"] = args.jobs
    if args.strict:
        over["run.strict"] = True
    if args.output_dir is not None:
        over["run.output_dir"] = str(args.output_dir)
    if getattr(args, "snr_db", None):
        if args.command == "estimate":
            over["estimate.snr_grid"] = tuple(args.snr_db)
        else:
            over["noma.snr_db"] = float(args.snr_db[0])
    if getattr(args, "epochs", None) is not None:
        over["estimate.epochs"] = args.epochs
    if getattr(args, "velocities", None):
        over["sweep.velocities"] = tuple(args.velocities)
    if getattr(args, "k", None):
        over["complexity.k_min"], over["complexity.k_max"] = args.k
    if args.config is not None:
        return parse_config(args.config, over)
    return apply_overrides(RunConfig(), over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            ok, result = replay(args.manifest, args.output_dir)
            for name, same in sorted(result.items()):
                print(f"{'identical' if same else 'DIFFERS'}  {name}")
            return 0 if ok else 1
        cfg = config_from_args(args)
        manifest = run_scenario(cfg)
    except (UnknownKey, ConfigValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CertificationFailed as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return 3
    out = cfg.resolved_output_dir()
    for name, digest in sorted(manifest["artifacts"].items()):
        print(f"{digest[:12]}  {out / name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
