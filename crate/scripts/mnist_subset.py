#!/usr/bin/env python3
"""Write a class-balanced 6000/1000 MNIST subset as IDX files.

Source is the `mnist` npm package (`npm pack mnist`), whose
src/digits/<k>.json files hold 28x28 digits as floats in [0, 1].

    python3 scripts/mnist_subset.py PACKAGE_DIR data/mnist
"""

import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package")
    ap.add_argument("out")
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for k in range(10):
        flat = json.loads((Path(args.package) / "src" / "digits" / f"{k}.json").read_text())["data"]
        digits = [flat[i : i + SIDE * SIDE] for i in range(0, len(flat), SIDE * SIDE)]
        rng.shuffle(digits)
        need = args.train_per_class + args.test_per_class
        if len(digits) < need:
            raise SystemExit(f"class {k} has {len(digits)} digits, need {need}")
        train += [(d, k) for d in digits[: args.train_per_class]]
        test += [(d, k) for d in digits[args.train_per_class : need]]
    rng.shuffle(train)
    rng.shuffle(test)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, rows in (("train", train), ("t10k", test)):
        pixels = [min(255, max(0, round(v * 255))) for d, _ in rows for v in d]
        write_idx(out / f"{prefix}-images-idx3-ubyte", 0x803, (len(rows), SIDE, SIDE), pixels)
        write_idx(out / f"{prefix}-labels-idx1-ubyte", 0x801, (len(rows),), [k for _, k in rows])
        print(f"{prefix}: {len(rows)} samples")


if __name__ == "__main__":
    main()
