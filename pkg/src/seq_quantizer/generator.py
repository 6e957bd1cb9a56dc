"""Decoder training against a frozen encoder, cluster-mean decoding and convex-combination grids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import LabeledDataset, epoch_permutation
from .errors import NumericError, PreconditionError, ShapeError
from .nn import EMBED_DIM, EncoderModel, FeatureSet, TrainConfig
from .quantizer import Codebook, assign

log = logging.getLogger(__name__)

IMAGE_SIDE = 28
GRID_COLS = 10


def mirror_decoder_spec(arch: str) -> list[dict]:
    """Layer specs of the decoder mirroring ``arch``, ending in a sigmoid."""
    if arch not in nn.ARCHS:
        raise PreconditionError(f"unknown architecture {arch!r}")
    if arch == "CAE-4":
        return [
            {"kind": "dense", "in": EMBED_DIM, "out": 1024}, {"kind": "relu"},
            {"kind": "dense", "in": 1024, "out": 64 * 7 * 7}, {"kind": "relu"},
            {"kind": "reshape", "shape": [64, 7, 7]},
            {"kind": "convtranspose2d", "in": 64, "out": 32, "kernel": 5}, {"kind": "relu"},
            {"kind": "convtranspose2d", "in": 32, "out": 1, "kernel": 5}, {"kind": "sigmoid"},
        ]
    hidden = [1024] if arch == "LAE-2" else [1024, 512, 256]
    dims = [EMBED_DIM] + hidden[::-1] + [IMAGE_SIDE * IMAGE_SIDE]
    specs = []
    for a, b in zip(dims[:-1], dims[1:]):
        specs += [{"kind": "dense", "in": a, "out": b}, {"kind": "relu"}]
    specs[-1] = {"kind": "sigmoid"}
    return specs


@dataclass
class DecoderModel:
    arch: str
    net: nn.Network
    trained: bool = False
    history: list = field(default_factory=list)

    @classmethod
    def build(cls, arch: str) -> "DecoderModel":
        layers = [nn.layer_from_spec(s) for s in mirror_decoder_spec(arch)]
        return cls(arch, nn.Network(layers, (EMBED_DIM,)))


def decoder_train_config(**overrides) -> TrainConfig:
    base = {"learning_rate": 0.001, "epochs": 20}
    base.update(overrides)
    return TrainConfig(**base)


def train_decoder(enc: EncoderModel, dec: DecoderModel, data: LabeledDataset, cfg: TrainConfig, init: bool = True) -> DecoderModel:
    """Fit ``dec`` to reconstruct ``data`` from frozen encoder features.

    The loss is the per-sample sum of squared pixel errors, averaged over the
    batch; only decoder parameters receive gradients. The encoder is frozen
    for the duration and its parameter bytes are checked afterwards.
    """
    if not enc.trained:
        raise PreconditionError("encoder must be trained before the decoder")
    if init:
        dec.net.init(np.random.default_rng(cfg.seed), cfg.weight_init)
    before = enc.net.param_bytes()
    was_frozen = [layer.frozen for layer in enc.net.layers]
    enc.net.freeze()
    try:
        z = nn.encode(enc, data.features).matrix  # stop-gradient: features are constants
        target = data.features.reshape((len(data),) + dec.net.output_shape)
        n = len(data)
        for epoch in range(cfg.epochs):
            total = 0.0
            order = epoch_permutation(n, cfg.seed, epoch)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                acts = nn.forward(dec.net, z[idx])
                diff = acts[-1] - target[idx]
                loss = float(np.sum(diff * diff)) / len(idx)
                if not math.isfinite(loss):
                    raise NumericError(f"decoder loss diverged at epoch {epoch}")
                nn.sgd_step(dec.net, nn.backward(dec.net, 2.0 * diff / len(idx), acts), cfg.learning_rate)
                total += loss * len(idx)
            pixel_mse = total / (n * target[0].size)
            dec.history.append({"epoch": epoch, "train_mse": pixel_mse})
            log.info("decoder epoch %d per-pixel mse %.5f", epoch, pixel_mse)
    finally:
        for layer, frozen in zip(enc.net.layers, was_frozen):
            layer.frozen = frozen
    if enc.net.param_bytes() != before:
        raise AssertionError("encoder parameters changed during decoder training")
    dec.trained = True
    return dec


def decode_batch(dec: DecoderModel, z) -> np.ndarray:
    """Decode an (N, 128) feature matrix into (N, 28, 28) images."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != EMBED_DIM:
        raise ShapeError(f"decoder expects {EMBED_DIM}-dim features, got {z.shape[1]}")
    return dec.net.predict(z).reshape(len(z), IMAGE_SIDE, IMAGE_SIDE)


def decode(dec: DecoderModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (EMBED_DIM,):
        raise ShapeError(f"decoder expects a feature row of shape ({EMBED_DIM},), got {z.shape}")
    return decode_batch(dec, z[None, :])[0]


def reconstruction_mse(enc: EncoderModel, dec: DecoderModel, data: LabeledDataset) -> float:
    """Per-pixel MSE of decode(encode(x)) against x."""
    recon = decode_batch(dec, nn.encode(enc, data.features).matrix)
    return nn.mse(data.features.reshape(recon.shape), recon)


def mean_image_mse(train: LabeledDataset, held_out: LabeledDataset) -> float:
    """Per-pixel MSE of predicting the training-set mean image for every held-out sample."""
    mean = train.features.reshape(len(train), -1).mean(axis=0)
    x = held_out.features.reshape(len(held_out), -1)
    return float(np.mean((x - mean) ** 2))


# ---------------------------------------------------------------- image grids


@dataclass
class ImageGrid:
    """rows x cols cells of 28x28 images; absent cells are black and not counted."""

    cells: np.ndarray  # (rows, cols, 28, 28)
    present: np.ndarray  # (rows, cols) bool
    annotated: np.ndarray  # (rows, cols) bool
    notes: list = field(default_factory=list)
    cell_info: dict = field(default_factory=dict)  # (r, c) -> metadata
    features: np.ndarray | None = None  # feature rows that were decoded, in cell order

    @classmethod
    def blank(cls, rows: int, cols: int) -> "ImageGrid":
        return cls(
            np.zeros((rows, cols, IMAGE_SIDE, IMAGE_SIDE)),
            np.zeros((rows, cols), dtype=bool),
            np.zeros((rows, cols), dtype=bool),
        )

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def n_cells(self) -> int:
        return int(self.present.sum())

    def put(self, r, c, image, annotated=False, **info):
        self.cells[r, c] = image
        self.present[r, c] = True
        self.annotated[r, c] = annotated
        if info:
            self.cell_info[(r, c)] = info


def cluster_mean_images(cb: Codebook, fs: FeatureSet, dec: DecoderModel, cols: int = GRID_COLS) -> ImageGrid:
    """Decode the mean member feature of every cluster, ordered by cluster label then index."""
    assignments = assign(fs, cb.centroids)
    counts = np.bincount(assignments, minlength=cb.K)
    notes = [f"cluster {j} has no members; skipped" for j in np.flatnonzero(counts == 0)]
    keep = sorted(np.flatnonzero(counts > 0), key=lambda j: (int(cb.cluster_labels[j]), int(j)))
    sums = np.zeros_like(cb.centroids)
    np.add.at(sums, assignments, fs.matrix)
    means = sums[keep] / counts[keep, None]
    cols = max(1, min(cols, len(keep)))
    grid = ImageGrid.blank(max(1, math.ceil(len(keep) / cols)), cols)
    grid.notes = notes
    images = decode_batch(dec, means) if keep else []
    for pos, (j, img) in enumerate(zip(keep, images)):
        grid.put(pos // cols, pos % cols, img, cluster=int(j), label=int(cb.cluster_labels[j]), size=int(counts[j]))
    grid.features = means
    return grid


@dataclass
class StyleMix:
    features: np.ndarray  # (3, d)
    alpha1: float
    alpha2: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != 3:
            raise ShapeError(f"a style mix needs exactly 3 feature rows, got {self.features.shape}")
        a = self.alphas
        if np.any(a < -1e-12) or not math.isclose(a.sum(), 1.0, abs_tol=1e-12):
            raise PreconditionError(f"alphas {a.tolist()} are not a convex combination")

    @property
    def alpha3(self) -> float:
        return 1.0 - self.alpha1 - self.alpha2

    @property
    def alphas(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha2, self.alpha3])

    def in_grid_range(self) -> bool:
        return 0 < self.alpha1 < 0.5 and 0 < self.alpha2 < 0.5


def convex_combine(mix: StyleMix) -> np.ndarray:
    x1, x2, x3 = mix.features
    return mix.alpha1 * x1 + mix.alpha2 * x2 + mix.alpha3 * x3


def alpha_steps(steps: int) -> np.ndarray:
    """``steps`` evenly spaced values strictly inside (0, 0.5)."""
    return 0.5 * np.arange(1, steps + 1) / (steps + 1)


def check_membership(mode: str, clusters, cb: Codebook):
    clusters = [int(c) for c in clusters]
    if mode == "intra":
        if len(set(clusters)) != 1:
            raise PreconditionError(f"intra-cluster mode needs one cluster, samples lie in {clusters}")
    elif mode == "inter":
        if len(set(clusters)) != 3:
            raise PreconditionError(f"inter-cluster mode needs three distinct clusters, got {clusters}")
        labels = {int(cb.cluster_labels[c]) for c in clusters}
        if len(labels) != 1:
            raise PreconditionError(f"inter-cluster clusters {clusters} carry different labels {sorted(labels)}")
    else:
        raise ValueError(f"unknown mode {mode!r}")


def interpolation_grid(dec: DecoderModel, fs: FeatureSet, cb: Codebook, mode: str, sample_indices, steps: int = 8) -> ImageGrid:
    """Decode convex combinations of three samples' features.

    The grid is (steps+2) x (steps+2). The three source decodes sit at the
    top-left, top-right and bottom-right corners (annotated). Interior cell
    (1+r, 1+c) uses alpha1 = a[steps-1-c], alpha2 = a[steps-1-r] with
    a = alpha_steps(steps), so x1 dominates towards the left, x2 towards the
    top, and x3 towards the bottom right. Remaining border cells stay absent.
    """
    if len(sample_indices) != 3:
        raise PreconditionError("exactly three sample indices are required")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    feats = fs.matrix[list(sample_indices)]
    clusters = assign(feats, cb.centroids)
    check_membership(mode, clusters, cb)

    a = alpha_steps(steps)
    mixes, where = [], []
    for r in range(steps):
        for c in range(steps):
            mixes.append(convex_combine(StyleMix(feats, a[steps - 1 - c], a[steps - 1 - r])))
            where.append((1 + r, 1 + c, a[steps - 1 - c], a[steps - 1 - r]))
    grid_features = np.vstack([feats] + mixes)
    images = decode_batch(dec, grid_features)

    side = steps + 2
    grid = ImageGrid.blank(side, side)
    corners = [(0, 0), (0, side - 1), (side - 1, side - 1)]
    for (r, c), img, idx in zip(corners, images[:3], sample_indices):
        grid.put(r, c, img, annotated=True, sample=int(idx))
    for (r, c, a1, a2), img in zip(where, images[3:]):
        grid.put(r, c, img, alpha1=float(a1), alpha2=float(a2))
    grid.features = grid_features
    return grid


def interior_cells(grid: ImageGrid) -> np.ndarray:
    mask = grid.present & ~grid.annotated
    return grid.cells[mask]


# ---------------------------------------------------------------- export


def to_bytes(values) -> np.ndarray:
    """round(v * 255) with halves rounded up, after clipping to [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def render_grid(grid: ImageGrid) -> np.ndarray:
    """Compose the grid into one uint8 canvas.

    Cells are separated by 1-pixel white gutters. When any cell is annotated
    every cell slot grows to 30x30 and annotated cells get a 1-pixel white
    frame (unannotated slots keep a black ring), so pixel data is never
    overwritten.
    """
    framed = bool(grid.annotated.any())
    pad = 1 if framed else 0
    slot = IMAGE_SIDE + 2 * pad
    h = grid.rows * slot + (grid.rows - 1)
    w = grid.cols * slot + (grid.cols - 1)
    canvas = np.full((h, w), 255, dtype=np.uint8)
    for r in range(grid.rows):
        for c in range(grid.cols):
            y, x = r * (slot + 1), c * (slot + 1)
            canvas[y:y + slot, x:x + slot] = 255 if grid.annotated[r, c] else 0
            canvas[y + pad:y + pad + IMAGE_SIDE, x + pad:x + pad + IMAGE_SIDE] = to_bytes(grid.cells[r, c])
    return canvas


def split_canvas(canvas: np.ndarray, rows: int, cols: int, framed: bool) -> np.ndarray:
    """Inverse of :func:`render_grid`: (rows, cols, 28, 28) floats in [0, 1]."""
    pad = 1 if framed else 0
    slot = IMAGE_SIDE + 2 * pad
    out = np.empty((rows, cols, IMAGE_SIDE, IMAGE_SIDE))
    for r in range(rows):
        for c in range(cols):
            y, x = r * (slot + 1) + pad, c * (slot + 1) + pad
            out[r, c] = canvas[y:y + IMAGE_SIDE, x:x + IMAGE_SIDE] / 255.0
    return out


def pgm_bytes(canvas: np.ndarray) -> bytes:
    h, w = canvas.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(canvas, dtype=np.uint8).tobytes()


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5, maxval 255) PGM, tolerating comments in the header."""
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"unsupported PGM: magic {magic!r}, maxval {maxval}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).copy()


def export_grid(grid: ImageGrid, path, fmt: str = "pgm") -> Path:
    path = Path(path)
    canvas = render_grid(grid)
    try:
        if fmt == "pgm":
            path.write_bytes(pgm_bytes(canvas))
        elif fmt == "png":
            from PIL import Image

            Image.fromarray(canvas).save(path, format="PNG")
        else:
            raise ValueError(f"unknown image format {fmt!r}")
    except OSError as exc:
        raise PreconditionError(f"cannot write {path}: {exc}") from exc
    return path


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.read_bytes()[:2] == b"P5":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"))
