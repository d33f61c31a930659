#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled with the npm `mnist` package into
gzipped IDX files (images-idx3-ubyte.gz / labels-idx1-ubyte.gz).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist10k_to_idx.py package/src/digits data/mnist10k

The digits are interleaved with a fixed permutation (seed 0) so that any
contiguous split is class-balanced in expectation.
"""
import gzip
import json
import os
import random
import struct
import sys


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        n = len(flat) // 784
        for i in range(n):
            px = flat[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
            labels.append(digit)
    order = list(range(len(labels)))
    random.Random(0).shuffle(order)
    os.makedirs(dst, exist_ok=True)
    with gzip.open(os.path.join(dst, "images-idx3-ubyte.gz"), "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, len(order), 28, 28))
        for i in order:
            fh.write(images[i])
    with gzip.open(os.path.join(dst, "labels-idx1-ubyte.gz"), "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(order)))
        fh.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} samples to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
