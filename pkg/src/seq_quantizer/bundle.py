"""Canonical binary model bundle.

Layout (all integers little-endian)::

    b"SEQ1"            magic
    u32                format version (1)
    u32                section count
    section*           4-byte ASCII tag, u64 payload length, payload

Sections appear in the fixed order META, ENC_, DEC_, CBK_; the last two are
optional.

META  UTF-8 JSON with sorted keys and no insignificant whitespace.
ENC_, DEC_
      u32 array count, then per array: u32 layer index, u8 name length,
      name (ASCII), u32 ndim, u32 dims[ndim], f64 data (C order).
CBK_  u32 K, u32 d, u32 num_classes, f64 centroids[K*d],
      i64 cluster_labels[K], i64 histograms[K*num_classes].

Serialization is a pure function of the bundle contents (no timestamps), so
load -> save reproduces the input bytes exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError
from .generator import DecoderModel
from .quantizer import Codebook

MAGIC = b"SEQ1"
FORMAT_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


@dataclass
class ModelBundle:
    encoder: nn.EncoderModel
    decoder: DecoderModel | None = None
    codebook: Codebook | None = None
    meta: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.encoder.arch

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta["arch"] = self.arch
        meta["format_version"] = FORMAT_VERSION
        meta["encoder_layers"] = self.encoder.net.spec()
        if self.decoder is not None:
            meta["decoder_layers"] = self.decoder.net.spec()
        else:
            meta.pop("decoder_layers", None)
        sections = [(b"META", canonical_json(meta)), (b"ENC_", _pack_params(self.encoder.net))]
        if self.decoder is not None:
            sections.append((b"DEC_", _pack_params(self.decoder.net)))
        if self.codebook is not None:
            sections.append((b"CBK_", _pack_codebook(self.codebook)))
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<II", FORMAT_VERSION, len(sections)))
        for tag, payload in sections:
            out.write(tag)
            out.write(struct.pack("<Q", len(payload)))
            out.write(payload)
        return out.getvalue()

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelBundle":
        if blob[:4] != MAGIC:
            raise DataError("not a SEQ bundle (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported bundle version {version}")
        pos, sections = 12, {}
        for _ in range(count):
            tag = blob[pos:pos + 4]
            (length,) = struct.unpack_from("<Q", blob, pos + 4)
            pos += 12
            if pos + length > len(blob):
                raise DataError(f"bundle section {tag!r} truncated")
            sections[tag] = blob[pos:pos + length]
            pos += length
        if pos != len(blob):
            raise DataError("trailing bytes after last bundle section")
        meta = json.loads(sections[b"META"])
        arch = meta["arch"]
        enc = nn.EncoderModel(arch, _network(meta["encoder_layers"], nn.input_shape(arch)), trained=True)
        _unpack_params(sections[b"ENC_"], enc.net)
        enc.p_e = meta.get("metrics", {}).get("P_E")
        dec = None
        if b"DEC_" in sections:
            dec = DecoderModel(arch, _network(meta["decoder_layers"], (nn.EMBED_DIM,)), trained=True)
            _unpack_params(sections[b"DEC_"], dec.net)
        cb = _unpack_codebook(sections[b"CBK_"]) if b"CBK_" in sections else None
        for key in ("arch", "format_version", "encoder_layers", "decoder_layers"):
            meta.pop(key, None)
        return cls(enc, dec, cb, meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read bundle {path}: {exc}") from exc
        return cls.from_bytes(blob)


def _network(specs, input_shape):
    return nn.Network([nn.layer_from_spec(s) for s in specs], input_shape)


def _pack_params(net: nn.Network) -> bytes:
    items = list(net.named_params())
    out = io.BytesIO()
    out.write(struct.pack("<I", len(items)))
    for (i, name), value in items:
        raw = name.encode("ascii")
        out.write(struct.pack("<IB", i, len(raw)))
        out.write(raw)
        out.write(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        out.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return out.getvalue()


def _unpack_params(payload: bytes, net: nn.Network):
    (count,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    for _ in range(count):
        i, nlen = struct.unpack_from("<IB", payload, pos)
        pos += 5
        name = payload[pos:pos + nlen].decode("ascii")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", payload, pos)
        shape = struct.unpack_from(f"<{ndim}I", payload, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        expected = net.layers[i].params[name].shape
        if value.shape != expected:
            raise DataError(f"bundle param layer {i} {name} has shape {value.shape}, expected {expected}")
        net.layers[i].params[name] = value


def _pack_codebook(cb: Codebook) -> bytes:
    k, d = cb.centroids.shape
    c = cb.histograms.shape[1]
    return (
        struct.pack("<III", k, d, c)
        + np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes()
        + np.ascontiguousarray(cb.cluster_labels, dtype="<i8").tobytes()
        + np.ascontiguousarray(cb.histograms, dtype="<i8").tobytes()
    )


def _unpack_codebook(payload: bytes) -> Codebook:
    k, d, c = struct.unpack_from("<III", payload, 0)
    pos = 12
    centroids = np.frombuffer(payload, dtype="<f8", count=k * d, offset=pos).reshape(k, d).astype(np.float64)
    pos += 8 * k * d
    labels = np.frombuffer(payload, dtype="<i8", count=k, offset=pos).astype(np.int64)
    pos += 8 * k
    hist = np.frombuffer(payload, dtype="<i8", count=k * c, offset=pos).reshape(k, c).astype(np.int64)
    return Codebook(centroids, labels, hist)
