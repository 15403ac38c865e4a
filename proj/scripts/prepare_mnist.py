#!/usr/bin/env python3
"""Build gzipped MNIST IDX files from the digits bundled in the npm `mnist` package.

The npm package ships the first 10000 MNIST training digits as per-class JSON
arrays (pixels already scaled to [0,1] with three decimals). They are shuffled
with a fixed seed and split into a train part and a held-out part that the
tools use as the retrieval corpus.

Usage:
    scripts/prepare_mnist.py [--tarball mnist-1.1.0.tgz] [--out data/mnist]

Without --tarball the script runs `npm pack mnist@1.1.0` in a temp directory.
If you already have the official IDX files, skip this script and point the
CLI at them instead.
"""

import argparse
import gzip
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile

ROWS = COLS = 28
PIXELS = ROWS * COLS


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), ROWS, COLS))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def load_digits(tarball):
    samples = []
    with tarfile.open(tarball, "r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = json.load(member)["data"]
            if len(flat) % PIXELS != 0:
                raise ValueError(f"digit {digit}: payload is not a multiple of {PIXELS}")
            for k in range(len(flat) // PIXELS):
                px = flat[k * PIXELS:(k + 1) * PIXELS]
                samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    return samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tarball")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    ap.add_argument("--test-size", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20200613)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            tarball = os.path.join(tmp, "mnist-1.1.0.tgz")
        samples = load_digits(tarball)

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test_size], samples[args.test_size:]

    os.makedirs(args.out, exist_ok=True)
    for split, items in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out, f"{split}-images-idx3-ubyte.gz"), [s[0] for s in items])
        write_idx_labels(os.path.join(args.out, f"{split}-labels-idx1-ubyte.gz"), [s[1] for s in items])
        print(f"{split}: {len(items)} images")


if __name__ == "__main__":
    main()
