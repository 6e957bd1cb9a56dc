"""
Decoding cluster means and mixing styles
========================================

A decoder is trained to invert the frozen encoder. Decoding the mean feature
of each cluster shows the "style" that cluster captured. Convex combinations
of three features, x = a1*x1 + a2*x2 + (1 - a1 - a2)*x3 with a1, a2 in
(0, 0.5), produce new samples between styles. The grids are written as PGM
(or PNG with --format png).

    python demos/demo_04_generation.py --bundle encoder.seq --data-dir /path/to/mnist
"""

import argparse
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from seq_quantizer import data, generator, nn, quantizer
from seq_quantizer.bundle import ModelBundle

parser = argparse.ArgumentParser(description="decoder, cluster-mean images and style interpolation")
parser.add_argument("--bundle", default="encoder.seq")
parser.add_argument("--data-dir", default=data.default_data_dir())
parser.add_argument("--limit", type=int, default=10000)
parser.add_argument("--epochs", type=int, default=5, help="decoder epochs; more gives sharper images")
parser.add_argument("--format", default="pgm", choices=("pgm", "png"))
parser.add_argument("--out", default="generated")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)

b = ModelBundle.load(args.bundle)
layout = nn.layout(b.arch)
train = data.load_dataset(args.data_dir, "train", layout, args.limit)
test = data.load_dataset(args.data_dir, "test", layout, 2000)

with threadpool_limits(1):
    # the encoder is frozen while the decoder learns; its bytes do not move
    before = b.encoder.net.param_bytes()
    dec = generator.train_decoder(b.encoder, generator.DecoderModel.build(b.arch), train,
                                  generator.decoder_train_config(epochs=args.epochs))
    print("encoder unchanged:", b.encoder.net.param_bytes() == before)
    print(f"held-out MSE {generator.reconstruction_mse(b.encoder, dec, test):.4f}, "
          f"mean-image baseline {generator.mean_image_mse(train, test):.4f}")

    fs = nn.encode(b.encoder, train)
    cb, _ = quantizer.fit_codebook(fs, quantizer.KmeansConfig(K=50, seed=0))

# one decoded image per cluster, sorted by the cluster's label
grid = generator.cluster_mean_images(cb, fs, dec)
print("cluster means ->", generator.export_grid(grid, out / f"cluster_means.{args.format}", args.format))

# three samples from one cluster (intra) and from three clusters sharing a label (inter)
members = quantizer.assign(fs, cb.centroids)
biggest = np.bincount(members).argmax()
intra_ids = np.flatnonzero(members == biggest)[:3]
label = cb.cluster_labels[biggest]
same_label = [c for c in np.flatnonzero(cb.cluster_labels == label) if np.any(members == c)][:3]
inter_ids = [int(np.flatnonzero(members == c)[0]) for c in same_label]
for mode, ids in (("intra", intra_ids), ("inter", inter_ids)):
    if len(ids) < 3:
        print(f"not enough clusters for {mode} mode")
        continue
    grid = generator.interpolation_grid(dec, fs, cb, mode, ids, steps=8)
    path = generator.export_grid(grid, out / f"{mode}.{args.format}", args.format)
    # re-encode the generated interior and see which class the codebook assigns
    cells = generator.interior_cells(grid)
    pred = quantizer.classify(nn.encode(b.encoder, cells.reshape((len(cells),) + nn.input_shape(b.arch))).matrix, cb)
    print(f"{mode} grid -> {path}; {np.mean(pred == label):.0%} of interior cells classify as {label}")
