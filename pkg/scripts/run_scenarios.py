"""Run every CLI scenario with its defaults into one directory each and replay the manifests."""

import argparse
import time
from pathlib import Path

from noma_deepsic.cli import replay, run_scenario
from noma_deepsic.config import SCENARIOS, RunConfig, apply_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("scenario_runs"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--replay", action="store_true", help="re-run each manifest and compare checksums")
    args = ap.parse_args()
    for name in SCENARIOS:
        cfg = apply_overrides(RunConfig(), {"run.scenario": name, "run.seed": args.seed})
        t0 = time.perf_counter()
        run_scenario(cfg, args.out / name)
        line = f"{name:<17} {time.perf_counter() - t0:6.1f} s"
        if args.replay:
            ok, _ = replay(args.out / name / "manifest.json", args.out / f"{name}.replay")
            line += "  replay identical" if ok else "  replay DIFFERS"
        print(line)


if __name__ == "__main__":
    main()
