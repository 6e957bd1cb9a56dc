"""
Quantizing the embedding with k-means
=====================================

k-means on the embedded training set gives K centroids. Each centroid takes
the majority label of its members, and a new sample is classified by its
nearest centroid. Sweeping K shows accuracy climbing towards the encoder's
own accuracy P_E, and select_k picks the smallest K within epsilon of it.

    python demos/demo_03_quantizer.py --bundle encoder.seq --data-dir /path/to/mnist
"""

import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from seq_quantizer import data, nn, quantizer
from seq_quantizer.bundle import ModelBundle

parser = argparse.ArgumentParser(description="k-means codebook, K sweep and select_k")
parser.add_argument("--bundle", default="encoder.seq")
parser.add_argument("--data-dir", default=data.default_data_dir())
parser.add_argument("--limit", type=int, default=10000)
parser.add_argument("--epsilon", type=float, default=0.02)
args = parser.parse_args()

b = ModelBundle.load(args.bundle)
layout = nn.layout(b.arch)
train = nn.encode(b.encoder, data.load_dataset(args.data_dir, "train", layout, args.limit))
test = nn.encode(b.encoder, data.load_dataset(args.data_dir, "test", layout))
p_e = b.encoder.p_e
print(f"{b.arch} encoder, P_E = {p_e:.4f}")

with threadpool_limits(1):
    # one codebook in detail
    cb, result = quantizer.fit_codebook(train, quantizer.KmeansConfig(K=30, seed=0))
    print(f"K=30: {result.n_iter} iterations, inertia {result.inertia:.1f}")
    print("clusters per label", np.bincount(cb.cluster_labels, minlength=10))
    purity = cb.histograms.max(axis=1) / np.maximum(cb.histograms.sum(axis=1), 1)
    print("least pure cluster", purity.argmin(), "purity", purity.min().round(3), "histogram", cb.histograms[purity.argmin()])
    print("first five test predictions", quantizer.classify(test.matrix[:5], cb), "truth", test.labels[:5])

    # accuracy as a function of K
    report = quantizer.sweep(train, [10, 20, 40, 80], quantizer.KmeansConfig(seed=0), test, p_e)
    for r in report.records:
        print(f"K={r.K:3d}  train P_Q={r.P_Q_train:.4f}  test={r.acc_test:.4f}")

    # smallest K whose test accuracy is within epsilon of the encoder
    k, sel = quantizer.select_k(train, p_e, args.epsilon, [10, 20, 40, 80], eval_fs=test)
    print("select_k:", k if k is not None else "none qualifies", f"(epsilon {args.epsilon})")
