#!/usr/bin/env python3
"""Convert the per-class JSON files shipped in the `fashion-mnist` npm package
into the four IDX files the `fmnist` loader expects.

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python3 scripts/fmnist_from_npm.py package/src/clothes /root/data/fmnist

Each class contributes 6,000 training and 1,000 test images (70,000 total).
Samples are interleaved round-robin across classes so the order is fixed.
"""
import json
import os
import struct
import sys

TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    per_class = []
    for c in range(10):
        with open(os.path.join(src, f"{c}.json")) as f:
            # Class 0 ships two empty placeholder rows; keep only full images.
            rows = [r for r in json.load(f)["data"] if len(r) == 28 * 28]
        if len(rows) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            sys.exit(f"class {c}: only {len(rows)} images")
        per_class.append(rows[: TRAIN_PER_CLASS + TEST_PER_CLASS])

    os.makedirs(dst, exist_ok=True)
    for split, lo, n in (("train", 0, TRAIN_PER_CLASS), ("t10k", TRAIN_PER_CLASS, TEST_PER_CLASS)):
        images = bytearray()
        labels = bytearray()
        for i in range(n):
            for c in range(10):
                images.extend(bytes(per_class[c][lo + i]))
                labels.append(c)
        count = n * 10
        write_idx(os.path.join(dst, f"{split}-images-idx3-ubyte"), 0x803, (count, 28, 28), images)
        write_idx(os.path.join(dst, f"{split}-labels-idx1-ubyte"), 0x801, (count,), labels)
        print(f"{split}: {count} images")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
