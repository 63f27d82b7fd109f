#!/usr/bin/env python3
"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

Usage: make_mnist_subset.py WHEEL_OR_CSV_GZ OUT_DIR

The subset holds 500 images per digit. The first 400 of each digit (file
order) go to the train split, the remaining 100 to the test split.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path):
    if src.suffix == ".whl":
        blob = zipfile.ZipFile(src).read(MEMBER)
    else:
        blob = src.read_bytes()
    for line in gzip.decompress(blob).decode().strip().split("\n"):
        vals = [int(v) for v in line.split(",")]
        yield vals[:784], vals[784]


def write_idx(out: Path, prefix: str, rows):
    n = len(rows)
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for px, _ in rows:
            f.write(bytes(px))
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in rows))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    seen = {}
    train, test = [], []
    for px, label in read_rows(src):
        k = seen.get(label, 0)
        seen[label] = k + 1
        (train if k < 400 else test).append((px, label))
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"train={len(train)} test={len(test)} -> {out}")


if __name__ == "__main__":
    main()
