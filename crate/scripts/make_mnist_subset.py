"""Build the bundled MNIST subset from the `mnist` npm package (v1.1.0).

The package ships 10,000 MNIST digits as JSON (pixel intensities in [0, 1]
rounded to three decimals). This script re-quantizes them to bytes, makes a
stratified 80/20 train/validation split with a fixed seed, and writes gzipped
IDX files in the standard MNIST layout.

usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    train_x, train_y, val_x, val_y = [], [], [], []
    for digit in range(10):
        raw = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        imgs = np.rint(raw.reshape(-1, 784) * 255.0).clip(0, 255)
        idx = rng.permutation(len(imgs))
        cut = int(round(0.8 * len(imgs)))
        train_x.append(imgs[idx[:cut]])
        train_y.append(np.full(cut, digit))
        val_x.append(imgs[idx[cut:]])
        val_y.append(np.full(len(imgs) - cut, digit))
    for name, xs, ys in (("train", train_x, train_y), ("t10k", val_x, val_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        write_idx_images(dst / f"{name}-images-idx3-ubyte.gz", x[order])
        write_idx_labels(dst / f"{name}-labels-idx1-ubyte.gz", y[order])
        print(name, len(y), np.bincount(y))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
