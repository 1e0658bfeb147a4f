"""Inference time and memory across ResNet block counts (run on a quiet machine).

    python scripts/bench_sweep.py --blocks 1 2 4 8 12 --batch-size 32
"""
import argparse

from ppgdistill.cli import run_bench


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--blocks", type=int, nargs="+", default=[1, 2, 4, 8, 12])
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--repetitions", type=int, default=20)
    args = p.parse_args()
    base = None
    print(f"{'model':>9} {'params':>8} {'time [ms]':>16} {'memory [MB]':>11} {'rel. time':>9}")
    for r in run_bench(args.blocks, args.batch_size, args.repetitions):
        base = base or r.mean_s
        print(f"{r.label:>9} {r.num_params:>8} {1e3 * r.mean_s:9.2f} ± {1e3 * r.std_s:5.2f} "
              f"{r.memory_bytes / 1e6:11.3f} {r.mean_s / base:9.2f}")


if __name__ == "__main__":
    main()
