"""Measured bits-back saving against log2((N-K)!) - log2(N-K) for random distinct clouds."""
import argparse
import sys
from pathlib import Path

import numpy as np

from gsimage.bitsback import bb_encode, expected_saving, rate_saving_bound, select_k

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import random_qc  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", default="2,8,64,512,4096,30000")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'N':>6} {'K*':>6} {'plain':>9} {'bb':>9} {'saved':>8} {'formula':>9} {'bound':>9}")
    for n in (int(v) for v in args.n.split(",")):
        qc = random_qc(rng, n, distinct=True)
        k = select_k(n, 56)
        bits = 8 * len(bb_encode(qc, k))
        print(f"{n:6d} {k:6d} {56 * n:9d} {bits:9d} {56 * n - bits:8d} {expected_saving(n, k):9.1f} "
              f"{rate_saving_bound(n):9.1f}")


if __name__ == "__main__":
    main()
