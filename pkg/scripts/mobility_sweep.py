"""HOF and ping-pong rates per velocity and policy, plus the oscillating-trace ping-pong test.

    python scripts/mobility_sweep.py --trials 500 --out sweep.csv
"""

import argparse

from noma_deepsic.handover import HandoverConfig, SweepConfig, pingpong_comparison, run_mobility_sweep, write_sweep_csv
from noma_deepsic.numerics import SeededRng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--velocities", type=float, nargs="+", default=[0, 30, 60, 90, 120])
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--ttt", type=int, default=3)
    ap.add_argument("--seed", type=int, default=2026)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    ho = HandoverConfig(alpha=args.alpha, ttt_steps=args.ttt)
    rows = run_mobility_sweep(args.velocities, args.trials, SweepConfig(handover=ho), SeededRng(args.seed))
    write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"{r.velocity_kmh:6.0f} {r.policy:<15} HOF {r.hof_rate:.3f}  ping-pong/trial {r.pingpong_rate:.3f}")
    pp = pingpong_comparison(args.trials, ho, SeededRng(args.seed + 1))
    print(f"oscillating trace: ping-pongs {pp.baseline.sum()} -> {pp.pdd.sum()}, p = {pp.p_value:.2e}")


if __name__ == "__main__":
    main()
