#!/usr/bin/env python3
"""Build gzipped IDX files from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The digits are shuffled with a fixed seed and split 5000/5000 into
train-* and t10k-* files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // (SIDE * SIDE)
        for k in range(n):
            px = data[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, max(0, round(v * 255))) for v in px), digit))
    random.Random(20190529).shuffle(samples)
    half = len(samples) // 2
    dst.mkdir(parents=True, exist_ok=True)
    for prefix, part in (("train", samples[:half]), ("t10k", samples[half:])):
        with gzip.GzipFile(dst / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), SIDE, SIDE))
            for px, _ in part:
                f.write(px)
        with gzip.GzipFile(dst / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
