"""Teacher vs. scratch/hard/soft/DKD students on the synthetic desk corpus.

    python scripts/compare_strategies.py --epochs 30 --seeds 0 1 2
"""
import argparse
import json

from ppgdistill.experiments import DESK_CORPUS, compare_strategies


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--teacher-blocks", type=int, default=6)
    p.add_argument("--student-blocks", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=DESK_CORPUS.noise_level)
    p.add_argument("--strategies", nargs="+", default=["scratch", "hard", "soft", "dkd"])
    p.add_argument("--json", help="write per-seed MAEs here")
    args = p.parse_args()

    from dataclasses import replace

    res = compare_strategies(
        replace(DESK_CORPUS, noise_level=args.noise),
        strategies=args.strategies,
        seeds=args.seeds,
        teacher_blocks=args.teacher_blocks,
        student_blocks=args.student_blocks,
        epochs=args.epochs,
        batch_size=args.batch_size,
        log=print,
    )
    print(f"\n{'strategy':>10}  mean MAE  per-seed")
    for k, v in res.maes.items():
        print(f"{k:>10}  {res.mean(k):8.3f}  " + " ".join(f"{x:.3f}" for x in v))
    print(f"teacher test MAE {res.teacher_mae:.3f}; {res.seconds:.0f} s total")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"teacher_mae": res.teacher_mae, "maes": res.maes}, fh, indent=2)


if __name__ == "__main__":
    main()
