"""Discriminator-as-encoder, embedding index and top-k retrieval."""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .tensor import DimensionError, Tensor, no_grad

INDEX_MAGIC = b"SKIDX1"
ENCODE_CHUNK = 64


class StructureError(ValueError):
    pass


class IndexFileError(ValueError):
    """Malformed or mismatched index file."""


class Encoder:
    """A discriminator with its final fully connected layer and sigmoid removed.

    Batch norm always runs on running statistics.
    """

    def __init__(self, model: nn.Model):
        layers = model.spec.layers
        fc_at = [i for i, l in enumerate(layers) if l.kind == "fc"]
        if not fc_at or any(l.kind != "sigmoid" for l in layers[fc_at[-1] + 1:]):
            raise StructureError(f"{model.spec.name} does not end in a fully connected classification head")
        self.model = model
        self.stop = fc_at[-1]
        self.dim = int(np.prod(model.spec.shape_chain()[self.stop]))
        self.checkpoint_hash = hashlib.sha256(nn.checkpoint_bytes(model)).hexdigest()

    def features(self, images: np.ndarray) -> np.ndarray:
        """Raw (unnormalised) encodings, shape (N, dim)."""
        images = np.asarray(images, dtype=np.float64)
        out = np.empty((len(images), self.dim))
        with no_grad():
            for s in range(0, len(images), ENCODE_CHUNK):
                y = self.model.forward(Tensor(images[s:s + ENCODE_CHUNK]), "eval", stop=self.stop)
                out[s:s + ENCODE_CHUNK] = y.values.reshape(len(y.values), -1)
        return out

    def embed(self, images: np.ndarray) -> np.ndarray:
        return normalize_rows(self.features(images))


class RawPixelEncoder:
    """Flattened pixels as the representation; an oracle for the sweep machinery."""

    checkpoint_hash = "raw-pixels"

    def embed(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return normalize_rows(images.reshape(len(images), -1))


def make_encoder(d: nn.Model) -> Encoder:
    if not d.spec.is_discriminator:
        raise StructureError(f"{d.spec.name} is not a discriminator")
    return Encoder(d)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Divide each row by its L2 norm; all-zero rows stay zero."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None]


@dataclass
class Embedding:
    vector: np.ndarray
    identifier: str = ""

    @property
    def degenerate(self) -> bool:
        return not np.any(self.vector)


def normalize(vector, identifier: str = "") -> Embedding:
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    return Embedding(normalize_rows(v[None])[0], identifier)


def encode(enc, image: Tensor, identifier: str = "") -> Embedding:
    values = image.values if isinstance(image, Tensor) else np.asarray(image)
    if values.shape != (1, 1, 64, 64):
        raise DimensionError(f"encode expects a (1, 1, 64, 64) image, got {values.shape}", axis="input")
    return Embedding(enc.embed(values)[0], identifier)


def similarity(a: Embedding, b: Embedding) -> float:
    """Dot product of unit embeddings; 0 when either is the degenerate zero vector."""
    if a.vector.shape != b.vector.shape:
        raise DimensionError(f"embedding sizes differ: {a.vector.shape} vs {b.vector.shape}")
    if a.degenerate or b.degenerate:
        return 0.0
    return float(a.vector @ b.vector)


@dataclass
class EmbeddingIndex:
    ids: list
    vectors: np.ndarray  # (N, dim), unit rows or zero rows
    checkpoint_hash: str = ""
    manifest_hash: str = ""
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index identifiers must be unique")
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError("one vector per identifier required")
        self._pos = {k: i for i, k in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def embedding(self, identifier: str) -> Embedding:
        return Embedding(self.vectors[self._pos[identifier]], identifier)


def build_index(enc, store) -> EmbeddingIndex:
    return EmbeddingIndex(list(store.ids), enc.embed(store.images), enc.checkpoint_hash,
                          getattr(store, "manifest_hash", ""))


def top_k(index: EmbeddingIndex, query: Embedding, k: int) -> list:
    """``k`` best (identifier, similarity) pairs, highest first, ties by ascending identifier."""
    if len(index) == 0:
        raise ValueError("empty index")
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    if query.vector.shape != (index.dim,):
        raise DimensionError(f"query has {query.vector.shape[0]} dims, index has {index.dim}")
    if query.degenerate:
        scores = np.zeros(len(index))
    else:
        scores = index.vectors @ query.vector
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def write_results_csv(results: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "identifier", "similarity"))
        for rank, (ident, sim) in enumerate(results, start=1):
            w.writerow((rank, ident, repr(sim)))


# -- index file -------------------------------------------------------------
#   b"SKIDX1", 32-byte sha256 of the encoder checkpoint, u32 count, u32 dim,
#   then per record: u32 len + utf-8 identifier, dim little-endian f64.

def index_bytes(index: EmbeddingIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    digest = bytes.fromhex(index.checkpoint_hash) if len(index.checkpoint_hash) == 64 else b"\0" * 32
    buf.write(digest)
    buf.write(struct.pack("<II", len(index), index.dim))
    for ident, vec in zip(index.ids, index.vectors):
        b = ident.encode("utf-8")
        buf.write(struct.pack("<I", len(b)))
        buf.write(b)
        buf.write(vec.astype("<f8").tobytes())
    return buf.getvalue()


def save_index(index: EmbeddingIndex, path) -> None:
    Path(path).write_bytes(index_bytes(index))


def load_index(path) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    if data[:6] != INDEX_MAGIC:
        raise IndexFileError(f"{path}: not a SKIDX1 index")
    if len(data) < 46:
        raise IndexFileError(f"{path}: truncated header")
    digest = data[6:38].hex()
    count, dim = struct.unpack_from("<II", data, 38)
    pos = 46
    ids, vecs = [], np.empty((count, dim))
    for i in range(count):
        if pos + 4 > len(data):
            raise IndexFileError(f"{path}: truncated at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids.append(data[pos:pos + n].decode("utf-8"))
        pos += n
        if pos + 8 * dim > len(data):
            raise IndexFileError(f"{path}: truncated at byte {pos}")
        vecs[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos)
        pos += 8 * dim
    if pos != len(data):
        raise IndexFileError(f"{path}: trailing bytes after offset {pos}")
    return EmbeddingIndex(ids, vecs, digest)
