"""Synthetic L2-error benchmark: our estimator (grid fits and ODE path) vs the KDE baseline.

    python scripts/run_benchmark.py --d 1 --replicates 20 --sample-sizes 20,100,500 --out bench_d1
"""
import argparse
import logging
from pathlib import Path

from distdyn.mmd_fit import FitConfig
from distdyn.ode_smooth import OdeConfig
from distdyn.simulate import DgpSpec, run_benchmark, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=1)
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--sample-sizes", default="20,50,100,200,300,500")
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="bench")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    logging.getLogger("jax").setLevel(logging.WARNING)

    spec = DgpSpec(d=args.d, replicates=args.replicates, seed=args.seed,
                   sample_sizes=tuple(int(v) for v in args.sample_sizes.split(",")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(spec, FitConfig(K=args.K, seed=args.seed),
                         OdeConfig(epochs=args.epochs, seed=args.seed),
                         out_path=out / "benchmark.csv", threads=args.threads)
    summary = summarize(rows)
    grid = set(spec.grid)
    print(f"{'method':6} {'n':>4} " + " ".join(f"t={t:<5.1f}" for t in spec.grid))
    for method in ("mmd", "ode", "kde"):
        for n in spec.sample_sizes:
            vals = {s["t"]: s["median_l2"] for s in summary
                    if s["method"] == method and s["n"] == n and s["t"] in grid}
            print(f"{method:6} {n:>4} " + " ".join(f"{vals.get(t, float('nan')):7.4f}"
                                                 for t in spec.grid))
    print(f"wrote {out / 'benchmark.csv'}")


if __name__ == "__main__":
    main()
