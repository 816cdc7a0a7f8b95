"""Final NRMSE and R2 of the transformer refiner with and without PDD over an SNR grid.

    python scripts/pdd_benefit.py --snr -5 0 5 --train 300 --test 200 --out pdd_benefit.csv
"""

import argparse
import csv

from noma_deepsic.metrics import nrmse, r_squared
from noma_deepsic.pipeline import DeepSicConfig, build_dataset, complex_to_real, fit_refiner


def evaluate(cfg: DeepSicConfig, n_train: int, n_test: int, seed: int):
    tr = build_dataset(cfg, n_train, seed, stream=0)
    te = build_dataset(cfg, n_test, seed, stream=1)
    p = complex_to_real(fit_refiner(tr).predict(te))
    a = complex_to_real(te.truth)
    return nrmse(complex_to_real(te.refined), a), nrmse(p, a), r_squared(p, a)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snr", type=float, nargs="+", default=[0.0])
    ap.add_argument("--train", type=int, default=300)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="pdd_benefit.csv")
    args = ap.parse_args()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "variant", "nrmse_refined", "nrmse_final", "r2_final"])
        for snr in args.snr:
            cfg = DeepSicConfig(snr_db=snr)
            for name, c in (("pdd", cfg), ("no_pdd", cfg.without_pdd())):
                row = evaluate(c, args.train, args.test, args.seed)
                w.writerow([snr, name, *(f"{x:.6g}" for x in row)])
                print(snr, name, *(f"{x:.4f}" for x in row))


if __name__ == "__main__":
    main()
