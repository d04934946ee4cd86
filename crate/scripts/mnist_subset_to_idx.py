#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

The package ships 10,000 MNIST digits as JSON (pixel values rounded to three
decimals). This writes a deterministic 8,000/2,000 train/test split in the
standard gzip'd IDX layout so the loaders can read it like the original files.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist-desk
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst, n_train=8000):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        raw = raw.reshape(-1, 784)
        images.append(np.clip(np.rint(raw * 255.0), 0, 255))
        labels.append(np.full(len(raw), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    os.makedirs(dst, exist_ok=True)
    write_idx_images(os.path.join(dst, "train-images-idx3-ubyte.gz"), images[:n_train])
    write_idx_labels(os.path.join(dst, "train-labels-idx1-ubyte.gz"), labels[:n_train])
    write_idx_images(os.path.join(dst, "t10k-images-idx3-ubyte.gz"), images[n_train:])
    write_idx_labels(os.path.join(dst, "t10k-labels-idx1-ubyte.gz"), labels[n_train:])
    print(f"wrote {n_train} train / {len(labels) - n_train} test digits to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
