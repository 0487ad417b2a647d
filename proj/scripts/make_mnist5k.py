#!/usr/bin/env python3
"""Build the bundled 5000-image MNIST subset as gzipped IDX files.

The source is the 5k MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns then the label).
Images are split 4000/500/500 (train/valid/test), stratified by label,
with a fixed shuffle seed.
"""
import argparse
import gzip
import io
import pathlib
import random
import struct
import subprocess
import sys
import tempfile
import zipfile


def find_csv(wheel_dir):
    wheels = sorted(pathlib.Path(wheel_dir).glob("mlxtend-*.whl"))
    if not wheels:
        subprocess.check_call([sys.executable, "-m", "pip", "download", "--no-deps",
                               "mlxtend", "-d", str(wheel_dir)])
        wheels = sorted(pathlib.Path(wheel_dir).glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheels[-1]) as z:
        return gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()


def write_idx_images(path, rows):
    buf = io.BytesIO()
    buf.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
    for pixels, _ in rows:
        buf.write(bytes(pixels))
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(buf.getvalue())


def write_idx_labels(path, rows):
    buf = io.BytesIO()
    buf.write(struct.pack(">II", 0x00000801, len(rows)))
    buf.write(bytes(label for _, label in rows))
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(buf.getvalue())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--wheel-dir", default=None)
    ap.add_argument("--seed", type=int, default=20151115)
    args = ap.parse_args()

    wheel_dir = args.wheel_dir or tempfile.mkdtemp()
    text = find_csv(wheel_dir)
    by_label = {}
    for line in text.strip().split("\n"):
        vals = [int(float(v)) for v in line.split(",")]
        by_label.setdefault(vals[-1], []).append((vals[:-1], vals[-1]))

    rng = random.Random(args.seed)
    splits = {"train": [], "valid": [], "test": []}
    for label in sorted(by_label):
        group = by_label[label]
        rng.shuffle(group)
        n = len(group)
        n_valid = n // 10
        n_test = n // 10
        splits["valid"] += group[:n_valid]
        splits["test"] += group[n_valid:n_valid + n_test]
        splits["train"] += group[n_valid + n_test:]
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in splits.items():
        rng.shuffle(rows)
        write_idx_images(out / f"mnist5k-{name}-images-idx3-ubyte.gz", rows)
        write_idx_labels(out / f"mnist5k-{name}-labels-idx1-ubyte.gz", rows)
        print(name, len(rows))


if __name__ == "__main__":
    main()
