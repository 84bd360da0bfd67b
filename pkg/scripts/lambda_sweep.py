"""Normals-loss weight sweep (RMSE/MNS trade-off) on a synthetic set.

    python3 scripts/lambda_sweep.py --data runs/e2e/data --epochs 10
"""
import argparse
import sys

from sparsetof.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--values", default="1,1e-1,1e-2,1e-3,1e-4,0")
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    sys.exit(cli_main([
        "sweep-lambda", "--data", args.data, "--values", args.values, "--out", args.out,
        "--epochs", str(args.epochs), "--check-trend",
    ]))


if __name__ == "__main__":
    main()
