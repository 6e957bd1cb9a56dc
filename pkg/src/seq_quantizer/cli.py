"""``seq`` command line: train-encoder, quantize, select-k, train-decoder, generate, eval.

Every command reads an optional JSON config (``--config``) overlaid by flags
and writes into ``--out``. The bundle file ``<out>/bundle.seq`` carries state
between commands. CSV schemas (header row always present, columns in this
order):

    metrics.csv           command, metric, value            (appended)
    encoder_history.csv   epoch, train_loss
    decoder_history.csv   epoch, train_mse
    sweep.csv             K, P_Q_train, acc_test, inertia, seed
    select_k.csv          K, P_Q, P_E, epsilon, qualifies, inertia, seed

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
5 precondition violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import generator, nn, quantizer
from .bundle import ModelBundle
from .config import RunConfig, load_config
from .data import LabeledDataset, load_dataset
from .errors import ConfigError, PreconditionError, SEQError

log = logging.getLogger("seq_quantizer")

SWEEP_FIELDS = ["K", "P_Q_train", "acc_test", "inertia", "seed"]
SELECT_FIELDS = ["K", "P_Q", "P_E", "epsilon", "qualifies", "inertia", "seed"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path: Path, fields, rows, append=False):
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(fields)
        for row in rows:
            values = [row[k] for k in fields] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def record_metrics(cfg: RunConfig, command: str, metrics: dict):
    write_csv(cfg.out / "metrics.csv", ["command", "metric", "value"], [(command, k, v) for k, v in metrics.items()], append=True)


def load_split(cfg: RunConfig, split: str) -> LabeledDataset:
    limit = cfg.train_limit if split == "train" else cfg.test_limit
    return load_dataset(cfg.require_data_dir(), split, nn.layout(cfg.arch), limit)


def bundle_path(cfg: RunConfig, args) -> Path:
    return Path(args.bundle) if getattr(args, "bundle", None) else cfg.out / "bundle.seq"


def load_bundle(cfg: RunConfig, args) -> ModelBundle:
    b = ModelBundle.load(bundle_path(cfg, args))
    if b.arch != cfg.arch:
        log.info("using bundle architecture %s", b.arch)
        cfg.arch = b.arch
    return b


def save_bundle(cfg: RunConfig, b: ModelBundle) -> str:
    digest = b.save(cfg.out / "bundle.seq")
    print(f"bundle {cfg.out / 'bundle.seq'} sha256 {digest}")
    return digest


# ---------------------------------------------------------------- commands


def cmd_train_encoder(cfg: RunConfig, args) -> ModelBundle:
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    start = time.perf_counter()
    enc, p_e = nn.train_encoder(train, cfg.arch, cfg.train, test)
    elapsed = time.perf_counter() - start
    b = ModelBundle(enc, meta={
        "provenance": {"seed": cfg.seed, "config_hash": cfg.config_hash(), "train": dataclasses.asdict(cfg.train)},
        "metrics": {"P_E": p_e},
    })
    write_csv(cfg.out / "encoder_history.csv", ["epoch", "train_loss"], [(h["epoch"], h["train_loss"]) for h in enc.history])
    record_metrics(cfg, "train-encoder", {"P_E": p_e, "train_seconds": round(elapsed, 1)})
    print(f"P_E {p_e:.4f} ({cfg.arch}, {elapsed:.0f}s)")
    save_bundle(cfg, b)
    return b


def _features(cfg, b):
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    return nn.encode(b.encoder, train), nn.encode(b.encoder, test)


def cmd_quantize(cfg: RunConfig, args) -> ModelBundle:
    b = load_bundle(cfg, args)
    ftr, fte = _features(cfg, b)
    p_e = b.meta.get("metrics", {}).get("P_E")
    if args.k_grid is not None or getattr(args, "sweep", False):
        rows = []
        for seed in cfg.sweep_seeds:
            report = quantizer.sweep(ftr, cfg.k_grid, dataclasses.replace(cfg.kmeans, seed=seed), fte, p_e)
            rows += [dataclasses.asdict(r) for r in report.records]
            for r in report.records:
                print(f"K={r.K:4d} seed={seed} P_Q_train={r.P_Q_train:.4f} acc_test={r.acc_test:.4f}")
        write_csv(cfg.out / "sweep.csv", SWEEP_FIELDS, rows)
        if args.epsilon is not None and p_e is not None:
            first = [r for r in rows if r["seed"] == cfg.sweep_seeds[0]]
            chosen = next((r["K"] for r in first if r["acc_test"] > p_e - cfg.epsilon), None)
            print(f"select_k K={chosen if chosen is not None else 'not-found'} epsilon={cfg.epsilon}")
    cb, result = quantizer.fit_codebook(ftr, cfg.kmeans)
    p_q = quantizer.clustering_accuracy(cb, ftr)
    acc = quantizer.clustering_accuracy(cb, fte)
    if p_e is not None and acc > p_e:
        log.warning("quantizer test accuracy %.4f exceeds encoder accuracy %.4f", acc, p_e)
    b.codebook = cb
    b.meta.setdefault("metrics", {}).update({"K": cfg.kmeans.K, "P_Q_train": p_q, "acc_test": acc, "inertia": result.inertia})
    b.meta.setdefault("provenance", {})["kmeans"] = dataclasses.asdict(cfg.kmeans)
    record_metrics(cfg, "quantize", {"K": cfg.kmeans.K, "P_Q_train": p_q, "acc_test": acc, "inertia": result.inertia})
    print(f"K={cfg.kmeans.K} P_Q_train={p_q:.4f} acc_test={acc:.4f}")
    save_bundle(cfg, b)
    return b


def cmd_select_k(cfg: RunConfig, args) -> ModelBundle:
    b = load_bundle(cfg, args)
    p_e = b.meta.get("metrics", {}).get("P_E")
    if p_e is None:
        raise PreconditionError("bundle has no encoder accuracy P_E")
    ftr, fte = _features(cfg, b)
    k, report = quantizer.select_k(ftr, p_e, cfg.epsilon, cfg.k_grid, cfg.kmeans, eval_fs=fte)
    rows = [
        {"K": r.K, "P_Q": r.acc_test, "P_E": p_e, "epsilon": cfg.epsilon, "qualifies": int(r.acc_test > p_e - cfg.epsilon), "inertia": r.inertia, "seed": r.seed}
        for r in report.records
    ]
    write_csv(cfg.out / "select_k.csv", SELECT_FIELDS, rows)
    if k is None:
        print(f"select_k not-found (P_E={p_e:.4f}, epsilon={cfg.epsilon})")
        record_metrics(cfg, "select-k", {"selected_K": None})
        return b
    print(f"select_k K={k} P_Q={report.P_Q:.4f} P_E={p_e:.4f} epsilon={cfg.epsilon}")
    cfg.kmeans = dataclasses.replace(cfg.kmeans, K=k)
    cb, result = quantizer.fit_codebook(ftr, cfg.kmeans)
    b.codebook = cb
    b.meta.setdefault("metrics", {}).update({"K": k, "P_Q_train": quantizer.clustering_accuracy(cb, ftr), "acc_test": report.P_Q, "inertia": result.inertia})
    b.meta.setdefault("provenance", {})["kmeans"] = dataclasses.asdict(cfg.kmeans)
    record_metrics(cfg, "select-k", {"selected_K": k, "P_Q": report.P_Q})
    save_bundle(cfg, b)
    return b


def cmd_train_decoder(cfg: RunConfig, args) -> ModelBundle:
    b = load_bundle(cfg, args)
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    before = b.encoder.net.param_bytes()
    dec = generator.train_decoder(b.encoder, generator.DecoderModel.build(b.arch), train, cfg.decoder)
    assert b.encoder.net.param_bytes() == before
    recon = generator.reconstruction_mse(b.encoder, dec, test)
    baseline = generator.mean_image_mse(train, test)
    b.decoder = dec
    b.meta.setdefault("metrics", {}).update({"recon_mse_test": recon, "mean_image_mse_test": baseline})
    b.meta.setdefault("provenance", {})["decoder"] = dataclasses.asdict(cfg.decoder)
    write_csv(cfg.out / "decoder_history.csv", ["epoch", "train_mse"], [(h["epoch"], h["train_mse"]) for h in dec.history])
    record_metrics(cfg, "train-decoder", {"recon_mse_test": recon, "mean_image_mse_test": baseline})
    print(f"held-out per-pixel MSE {recon:.5f} (mean-image baseline {baseline:.5f})")
    save_bundle(cfg, b)
    return b


def cmd_generate(cfg: RunConfig, args) -> list[Path]:
    b = load_bundle(cfg, args)
    if b.decoder is None:
        raise PreconditionError("bundle has no decoder; run train-decoder first")
    if b.codebook is None:
        raise PreconditionError("bundle has no codebook; run quantize first")
    ftr = nn.encode(b.encoder, load_split(cfg, "train"))
    ext = cfg.format
    if args.mode == "cluster-means":
        grid = generator.cluster_mean_images(b.codebook, ftr, b.decoder)
        path = cfg.out / f"cluster_means_K{b.codebook.K}.{ext}"
    else:
        if not args.ids or len(args.ids) != 3:
            raise ConfigError("--ids needs exactly three training-sample indices")
        if max(args.ids) >= len(ftr) or min(args.ids) < 0:
            raise PreconditionError(f"sample ids must lie in 0..{len(ftr) - 1}")
        grid = generator.interpolation_grid(b.decoder, ftr, b.codebook, args.mode, args.ids, cfg.steps)
        path = cfg.out / f"{args.mode}_{'_'.join(map(str, args.ids))}.{ext}"
    for note in grid.notes:
        log.warning(note)
    generator.export_grid(grid, path, ext)
    print(f"wrote {path} ({grid.n_cells} cells)")
    return [path]


def cmd_eval(cfg: RunConfig, args) -> dict:
    b = load_bundle(cfg, args)
    if b.codebook is None:
        raise PreconditionError("bundle has no codebook; run quantize or select-k first")
    split = args.split
    fs = nn.encode(b.encoder, load_split(cfg, split))
    acc = quantizer.clustering_accuracy(b.codebook, fs)
    key = "P_Q_train" if split == "train" else "acc_test"
    record_metrics(cfg, "eval", {key: acc})
    print(f"{key}={acc!r}")
    return {key: acc}


COMMANDS = {
    "train-encoder": cmd_train_encoder,
    "quantize": cmd_quantize,
    "select-k": cmd_select_k,
    "train-decoder": cmd_train_decoder,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--arch", choices=nn.ARCHS)
    common.add_argument("--k", type=int, help="number of clusters K")
    common.add_argument("--k-grid", type=_int_list, help="ascending comma-separated K values")
    common.add_argument("--epsilon", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (1 = deterministic)")
    common.add_argument("--format", choices=("pgm", "png"))
    common.add_argument("--data-dir", help="directory with MNIST-style IDX files (default $SEQ_DATA_DIR)")
    common.add_argument("--bundle", help="input bundle (default <out>/bundle.seq)")
    common.add_argument("--epochs", type=int, help="override training epochs for this command")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seq-quantizer", description="Supervised-encoding quantizer pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-encoder", parents=[common], help="pretrain the encoder with a softmax head")
    q = sub.add_parser("quantize", parents=[common], help="fit the k-means codebook; --k-grid also writes sweep.csv")
    q.add_argument("--sweep", action="store_true", help="run the K sweep over the configured grid")
    sub.add_parser("select-k", parents=[common], help="smallest K with P_Q > P_E - epsilon")
    sub.add_parser("train-decoder", parents=[common], help="train the decoder against the frozen encoder")
    g = sub.add_parser("generate", parents=[common], help="decode cluster means or convex-combination grids")
    g.add_argument("--mode", choices=("cluster-means", "intra", "inter"), default="cluster-means")
    g.add_argument("--ids", type=_int_list, help="three training-sample indices")
    g.add_argument("--steps", type=int)
    e = sub.add_parser("eval", parents=[common], help="nearest-centroid accuracy on a split")
    e.add_argument("--split", choices=("train", "test"), default="test")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(
            args.config, seed=args.seed, arch=args.arch, k=args.k, k_grid=args.k_grid, epsilon=args.epsilon,
            out=args.out, threads=args.threads, format=args.format, data_dir=args.data_dir,
            steps=getattr(args, "steps", None),
        )
        if args.epochs is not None:
            stage = "decoder" if args.command == "train-decoder" else "train"
            setattr(cfg, stage, dataclasses.replace(getattr(cfg, stage), epochs=args.epochs))
        cfg.out.mkdir(parents=True, exist_ok=True)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command](cfg, args)
    except SEQError as exc:
        print(f"seq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
