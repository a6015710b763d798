"""Compare the numba kernels with the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse

from flexsim.harness.bench import kernel_benchmark
from flexsim.kernels import HAVE_NUMBA


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"numba active: {HAVE_NUMBA}")
    print(f"{'kernel':<34}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  same")
    for r in kernel_benchmark(args.seed, args.repeat):
        print(f"{r['kernel']:<34}{r['numba_s'] * 1e3:>12.4f}{r['numpy_s'] * 1e3:>12.4f}"
              f"{r['speedup']:>10.2f}  {r['identical']}")


if __name__ == "__main__":
    main()
