"""
Reading IDX files and iterating over shuffled batches
=====================================================

MNIST and fashion-MNIST ship as big-endian IDX files. This script parses
one split, looks at the raw bytes, normalizes to [0, 1] and walks through a
seeded, reproducible epoch of mini-batches.

    python demos/demo_01_data.py --data-dir /path/to/mnist
"""

import argparse

import numpy as np

from seq_quantizer import data

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("--data-dir", default=data.default_data_dir())
args = parser.parse_args()

# the raw split: uint8 images (N, 28, 28) and uint8 labels (N,)
raw = data.load_raw(args.data_dir, "test")
print("raw images", raw.images.shape, raw.images.dtype, "labels", raw.labels.shape)
print("label counts", np.bincount(raw.labels, minlength=10))

# encode_idx is the exact inverse of the parser, byte for byte
blob = data.encode_idx(raw.labels[:5])
print("IDX header of five labels:", blob[:8].hex(" "), "payload", list(blob[8:]))

# pixel v becomes v / 255; 'chw' adds the channel axis the conv encoder expects
flat = data.normalize(raw, "flat", "test")
chw = data.normalize(raw, "chw", "test")
print("flat", flat.features.shape, "chw", chw.features.shape, "range", flat.features.min(), flat.features.max())

# one epoch of batches; the order is a pure function of (seed, epoch)
sizes = [len(y) for _, y in data.batches(flat, 4096, seed=0, epoch=0)]
print("batch sizes", sizes)
first = next(iter(data.batches(flat, 8, seed=0, epoch=0)))[1]
again = next(iter(data.batches(flat, 8, seed=0, epoch=0)))[1]
other = next(iter(data.batches(flat, 8, seed=0, epoch=1)))[1]
print("epoch 0 first labels", first, "repeatable:", np.array_equal(first, again))
print("epoch 1 first labels", other)
