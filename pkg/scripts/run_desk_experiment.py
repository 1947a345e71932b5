"""Run the desk-scale phantom experiment and print the ablation table.

    python scripts/run_desk_experiment.py --out runs/desk --seed 0
"""
import argparse

from bionet.experiment import run_desk_experiment


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--test", type=int, default=16)
    args = p.parse_args()
    res = run_desk_experiment(args.out, args.seed, args.train, args.test)
    print(res["table"])
    print(f"stage-1 thickness MAE: {res['bio_val_mae']:.3f} px")
    for mode, rep in res["untrained"].items():
        print(f"untrained {mode}: DI {100 * rep.dice:.2f}")
    print("timings (s):", {k: round(v, 1) for k, v in res["timings"].items()})


if __name__ == "__main__":
    main()
