"""End-to-end CLI pipeline: data, LC training, rho sweep, difficulty stats, kernel bench.

    python3 scripts/pipeline.py --root runs/demo [--train 400 --val 100 --epochs 3]

Everything lands under ``--root`` as CSV/PPM/PGM/JSON.
"""
import argparse
import sys
from pathlib import Path

from layercascade.cli import main as cli


def run(*argv):
    code = cli([str(a) for a in argv])
    if code != 0:
        sys.exit(f"step failed ({code}): {' '.join(map(str, argv))}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/demo")
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--epochs", type=int, default=3, help="per phase")
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--rho", type=float, default=0.985)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    root = Path(a.root)
    run("--seed", a.seed, "gen-data", "--out", root / "data/train", "--count", a.train, "--ambiguity", 0.2)
    run("--seed", a.seed + 1, "gen-data", "--out", root / "data/val", "--count", a.val, "--ambiguity", 0.2)
    run("--seed", a.seed, "--deterministic", "train", "--train-data", root / "data/train",
        "--val-data", root / "data/val", "--out", root / "lc", "--epochs-initial", a.epochs,
        "--epochs-cascade", a.epochs, "--lr", a.lr, "--rho", a.rho,
        "--set", f"train.drop_every_initial={max(1, 2 * a.epochs // 3)}",
        "--set", f"train.drop_every_cascade={max(1, 2 * a.epochs // 3)}")
    ckpt = root / "lc" / "model.ckpt"
    run("sweep-rho", "--checkpoint", ckpt, "--data", root / "data/val", "--out", root / "sweep.csv")
    run("stats", "--checkpoint", ckpt, "--data", root / "data/val", "--rho", a.rho, "--out", root / "stats.csv")
    run("infer", "--checkpoint", ckpt, "--image", root / "data/val/sample_00000.ppm", "--out", root / "infer")
    run("bench", "--out", root / "bench.csv")
    print((root / "sweep.csv").read_text())


if __name__ == "__main__":
    main()
