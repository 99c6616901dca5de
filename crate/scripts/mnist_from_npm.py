#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

The npm package (https://github.com/cazala/mnist) bundles 10,000 MNIST digits
as 784-float arrays rounded to three decimals. Pixels are mapped back to bytes
with round(v * 255), which recovers the original byte for every value.

usage: mnist_from_npm.py <package-dir> <out-dir>
"""
import json
import os
import struct
import sys

import numpy as np


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
            data = json.load(fh)["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 784)
        images.append(np.rint(arr * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(arr.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "images.idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, len(labels), 28, 28))
        fh.write(images.tobytes())
    with open(os.path.join(out, "labels.idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.tobytes())
    print(f"wrote {len(labels)} images; per-class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
