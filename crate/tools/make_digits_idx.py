#!/usr/bin/env python3
"""Build the bundled handwritten-digits dataset in MNIST IDX format.

Source: scikit-learn's copy of the UCI ML handwritten digits set
(1797 images, 8x8, intensity 0..16). Each image is upscaled to 28x28
(3x pixel replication to 24x24, then a 2-pixel zero border) so it is a
drop-in substitute for MNIST files, and augmented with the four 1-pixel
shifts of itself (5x total).

Outputs big-endian IDX files under data/digits/:
  train-images-idx3-ubyte / train-labels-idx1-ubyte   (7185 examples)
  t10k-images-idx3-ubyte  / t10k-labels-idx1-ubyte    (1800 examples)

Deterministic: stratified 1437/360 split with random_state=0.
"""

import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

SHIFTS = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]


def upscale(img8):
    a = np.kron(img8, np.ones((3, 3)))
    a = np.pad(a, 2)
    return np.round(a * 255.0 / 16.0).astype(np.uint8)


def shift_zero_fill(imgs, dx, dy):
    s = np.roll(np.roll(imgs, dx, axis=2), dy, axis=1).copy()
    if dx > 0:
        s[:, :, :dx] = 0
    if dx < 0:
        s[:, :, dx:] = 0
    if dy > 0:
        s[:, :dy, :] = 0
    if dy < 0:
        s[:, dy:, :] = 0
    return s


def augment(imgs, labels):
    outs, outl = [], []
    for dx, dy in SHIFTS:
        outs.append(shift_zero_fill(imgs, dx, dy))
        outl.append(labels)
    return np.concatenate(outs), np.concatenate(outl)


def write_idx_images(path, imgs):
    n, r, c = imgs.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, r, c))
        f.write(imgs.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(out_dir):
    digits = load_digits()
    images = np.stack([upscale(im) for im in digits.images])
    xtr, xte, ytr, yte = train_test_split(
        images, digits.target, test_size=360, stratify=digits.target, random_state=0
    )
    xtr, ytr = augment(xtr, ytr)
    xte, yte = augment(xte, yte)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", xtr)
    write_idx_labels(out / "train-labels-idx1-ubyte", ytr)
    write_idx_images(out / "t10k-images-idx3-ubyte", xte)
    write_idx_labels(out / "t10k-labels-idx1-ubyte", yte)
    print(f"wrote {len(xtr)} train / {len(xte)} test examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
