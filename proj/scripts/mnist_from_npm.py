#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000
28x28 MNIST digits as per-class JSON arrays of floats in [0, 1]. This script
interleaves them with a fixed permutation and writes a train/test split in
the standard big-endian IDX format.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
N_TRAIN = 8000
SEED = 20190601


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        raw = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((digit, [max(0, min(255, round(v * 255))) for v in px]))
    random.Random(SEED).shuffle(samples)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:N_TRAIN]), ("test", samples[N_TRAIN:])):
        write_images(out / f"{name}-images-idx3-ubyte", [s[1] for s in part])
        write_labels(out / f"{name}-labels-idx1-ubyte", [s[0] for s in part])
        print(f"{name}: {len(part)} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
