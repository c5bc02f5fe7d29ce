#!/usr/bin/env python3
"""Build MNIST IDX files from the digits bundled in the `mnist` npm package.

The npm package ships 10,000 MNIST digits as per-class JSON files with pixel
values in [0, 1] rounded to three decimals. This script splits them per class
into a train part (first N per class) and a test part (the rest), and writes
the four standard IDX files:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:
    scripts/mnist_from_npm.py [--out data/mnist] [--train-per-class 600] [--package DIR]

Without --package the tarball is fetched with `npm pack mnist`.
"""

import argparse
import json
import os
import struct
import subprocess
import tarfile
import tempfile


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def interleave(per_class):
    """Round-robin over classes so the file order is class-balanced."""
    out = []
    cursors = [0] * 10
    remaining = sum(len(v) for v in per_class)
    while remaining:
        for d in range(10):
            if cursors[d] < len(per_class[d]):
                out.append((per_class[d][cursors[d]], d))
                cursors[d] += 1
                remaining -= 1
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--package", help="unpacked npm package directory")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package
        if pkg is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            tgz = [p for p in os.listdir(tmp) if p.endswith(".tgz")][0]
            with tarfile.open(os.path.join(tmp, tgz)) as t:
                t.extractall(tmp)
            pkg = os.path.join(tmp, "package")

        train, test = [], []
        for d in range(10):
            with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as f:
                raw = json.load(f)["data"]
            n = len(raw) // 784
            imgs = [
                [min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
                for i in range(n)
            ]
            if n <= args.train_per_class:
                raise SystemExit(f"class {d} has only {n} digits")
            train.append(imgs[: args.train_per_class])
            test.append(imgs[args.train_per_class:])

    os.makedirs(args.out, exist_ok=True)
    for prefix, split in (("train", train), ("t10k", test)):
        rows = interleave(split)
        write_idx_images(os.path.join(args.out, f"{prefix}-images-idx3-ubyte"),
                         [r[0] for r in rows])
        write_idx_labels(os.path.join(args.out, f"{prefix}-labels-idx1-ubyte"),
                         [r[1] for r in rows])
        print(f"{prefix}: {len(rows)} images")


if __name__ == "__main__":
    main()
