"""
Training a supervised encoder
=============================

The encoder is trained as an ordinary classifier with a temporary
dense(128 -> 10) softmax head. After training the head is dropped and the
post-ReLU 128-dimensional layer becomes the embedding that everything else
works with.

    python demos/demo_02_encoder.py --data-dir /path/to/mnist --limit 10000 --epochs 3

The full default run (all 60000 images, 20 epochs) takes a few minutes on one
core and lands around 97% test accuracy.
"""

import argparse
import logging

import numpy as np
from threadpoolctl import threadpool_limits

from seq_quantizer import data, nn
from seq_quantizer.bundle import ModelBundle

parser = argparse.ArgumentParser(description="train an encoder and save it as a bundle")
parser.add_argument("--data-dir", default=data.default_data_dir())
parser.add_argument("--arch", default="LAE-2", choices=nn.ARCHS)
parser.add_argument("--limit", type=int, default=10000, help="training images to use")
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--out", default="encoder.seq")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

layout = nn.layout(args.arch)
train = data.load_dataset(args.data_dir, "train", layout, args.limit)
test = data.load_dataset(args.data_dir, "test", layout)

# the network that gets trained: encoder layers followed by the softmax head
print("encoder layers:", [layer.spec()["kind"] for layer in nn.encoder_layers(args.arch)])

cfg = nn.TrainConfig(epochs=args.epochs, seed=0)
with threadpool_limits(1):
    enc, p_e = nn.train_encoder(train, args.arch, cfg, test)
print(f"P_E = {p_e:.4f}")

# the embedding: one 128-vector per image, non-negative because of the ReLU
fs = nn.encode(enc, test)
print("embedding", fs.matrix.shape, "fraction of zeros", np.mean(fs.matrix == 0).round(3))

digest = ModelBundle(enc, meta={"metrics": {"P_E": p_e}}).save(args.out)
print("saved", args.out, "sha256", digest)
