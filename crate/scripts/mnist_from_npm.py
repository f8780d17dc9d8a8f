#!/usr/bin/env python3
"""Rebuild data/mnist/t10k-*-idx*-ubyte.gz from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships the 10,000
MNIST test digits as per-class JSON arrays of [0,1] floats. This script
restores 8-bit pixels, interleaves the classes with a fixed shuffle and writes
standard IDX files that `load_image_dataset("mnist", ...)` reads.

usage: npm pack mnist && tar xzf mnist-*.tgz && python3 mnist_from_npm.py package/src/digits OUT_DIR
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main() -> None:
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            samples.append((pixels, digit))
    random.Random(0).shuffle(samples)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "t10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / "t10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for _, label in samples))


if __name__ == "__main__":
    main()
