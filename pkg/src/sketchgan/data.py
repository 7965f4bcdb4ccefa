"""Synthetic mark generation, PGM image I/O and the dataset manifest.

Marks are composed from a fixed library of stroke primitives ("parts"),
rasterised as ink (1.0) on a zero background.  A share of the marks are
near-duplicates of earlier ones so that exact-match retrieval has a ground
truth.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor

IMAGE_SIZE = 64
MANIFEST_NAME = "manifest.tsv"
_HEADER_PREFIX = "# sketchgan-manifest"


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    pass


# -- part library -----------------------------------------------------------
# Parts live in a unit frame [-1, 1]^2 with y pointing down.  Each part is a
# list of polylines.

def _arc(cx, cy, r, a0, a1, steps=16):
    t = np.linspace(math.radians(a0), math.radians(a1), steps + 1)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in t]


PARTS: tuple = (
    [[(0, -1), (0, 1)]],                                          # 0 staff
    [[(-0.5, -0.45), (0.5, -0.45)]],                              # 1 crossbar
    [[(-0.5, 0.45), (0.5, 0.45)]],                                # 2 low crossbar
    [[(-0.5, -0.5), (0, -1), (0.5, -0.5)]],                       # 3 chevron up
    [[(-0.5, 0.5), (0, 1), (0.5, 0.5)]],                          # 4 chevron down
    [[(0, -0.3), (-0.6, -1)], [(0, -0.3), (0.6, -1)]],            # 5 fork top
    [[(0, 0.3), (-0.6, 1)], [(0, 0.3), (0.6, 1)]],                # 6 fork legs
    [[(0, -1), (0.6, -0.6), (0, -0.2)]],                          # 7 pennant right ("4")
    [_arc(0, -0.8, 0.2, 0, 360)],                                 # 8 small loop
    [_arc(0, 0.72, 0.28, 0, 360)],                                # 9 ring
    [[(-0.5, -0.5), (0.5, 0.5)], [(0.5, -0.5), (-0.5, 0.5)]],     # 10 saltire
    [[(0, 1), (0.45, 1), (0.45, 0.7)]],                           # 11 hook
    [_arc(0, -0.55, 0.4, 180, 360)],                              # 12 arch
    [[(-0.4, 0.2), (0.4, 0.2), (0.4, 0.9), (-0.4, 0.9), (-0.4, 0.2)]],  # 13 box
    [[(-0.55, 1), (0, 0.35), (0.55, 1), (-0.55, 1)]],             # 14 triangle base
    [[(0, -1), (-0.55, -0.8), (0, -0.6)]],                        # 15 pennant left
    [[(-0.3, -0.65), (0.3, -0.65)], [(-0.3, -0.2), (0.3, -0.2)]],  # 16 double bar
    [[(-0.6, 0.6), (0.6, -0.2)]],                                 # 17 slash
    [[(0, 0.2), (0.3, 0.5), (0, 0.8), (-0.3, 0.5), (0, 0.2)]],    # 18 lozenge
    [[(-0.6 + 0.06 * i, 0.1 + 0.15 * math.sin(i * math.pi / 5)) for i in range(21)]],  # 19 wave
)

STROKE_WIDTHS = (1.5, 2.0)
MARGIN = 4.0  # pixels between the mark's ink bbox centre-line and the frame edge


def _transform(points: np.ndarray, dx: float, dy: float, scale: float, rot_deg: float) -> np.ndarray:
    a = math.radians(rot_deg)
    c, s = math.cos(a), math.sin(a)
    x, y = points[:, 0] * scale, points[:, 1] * scale
    return np.stack([c * x - s * y + dx, s * x + c * y + dy], axis=1)


def mark_polylines(spec: dict) -> list:
    """Polylines of a mark in pixel coordinates (x = column, y = row)."""
    lines = []
    for p in spec["parts"]:
        for line in PARTS[p["part"]]:
            lines.append(_transform(np.asarray(line, dtype=float), p["dx"], p["dy"], p["scale"], p["rot"]))
    pts = np.concatenate(lines)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = max(float((hi - lo).max()), 1e-6)
    span = IMAGE_SIZE - 1 - 2 * MARGIN
    k = span / extent
    centre = (lo + hi) / 2
    mid = (IMAGE_SIZE - 1) / 2
    return [(line - centre) * k + mid for line in lines]


def rasterize(polylines: list, width: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary raster: 1 where a pixel centre lies within width/2 of a stroke."""
    segs = []
    for line in polylines:
        segs.append(np.stack([line[:-1], line[1:]], axis=1))
    seg = np.concatenate(segs)  # (S, 2, 2)
    a, b = seg[:, 0], seg[:, 1]
    yy, xx = np.mgrid[0:size, 0:size]
    p = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)  # (P, 2)
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = ((p[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d2 = ((p[:, None, :] - closest) ** 2).sum(axis=2).min(axis=1)
    return (d2 <= (width / 2) ** 2).astype(np.float64).reshape(size, size)


def render_mark(spec: dict) -> np.ndarray:
    return rasterize(mark_polylines(spec), spec["width"])


def random_mark_spec(rng: np.random.Generator) -> dict:
    count = int(rng.integers(2, 6))
    ids = list(rng.choice(len(PARTS), size=count, replace=False))
    # most marks hang off a vertical staff
    if 0 not in ids and rng.random() < 0.7:
        ids[0] = 0
    parts = []
    for pid in ids:
        parts.append({
            "part": int(pid),
            "dx": round(float(rng.uniform(-0.15, 0.15)), 4),
            "dy": round(float(rng.uniform(-0.15, 0.15)), 4),
            "scale": round(float(rng.uniform(0.8, 1.2)), 4),
            "rot": round(float(rng.uniform(-10, 10)), 3),
        })
    return {"parts": parts, "width": float(STROKE_WIDTHS[int(rng.integers(len(STROKE_WIDTHS)))])}


def jitter_mark_spec(spec: dict, rng: np.random.Generator) -> dict:
    """A near-duplicate: every part perturbed slightly."""
    parts = []
    for p in spec["parts"]:
        parts.append({
            "part": p["part"],
            "dx": round(p["dx"] + float(rng.uniform(-0.008, 0.008)), 4),
            "dy": round(p["dy"] + float(rng.uniform(-0.008, 0.008)), 4),
            "scale": round(p["scale"] * float(rng.uniform(0.99, 1.01)), 4),
            "rot": round(p["rot"] + float(rng.uniform(-0.6, 0.6)), 3),
        })
    return {"parts": parts, "width": spec["width"]}


# -- PGM I/O ----------------------------------------------------------------

def encode_pgm(values: np.ndarray) -> bytes:
    """8-bit binary PGM of a 2-D array in [0, 1] (round to nearest)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary (P5) PGM into a float array with values byte/maxval."""
    if data[:2] != b"P5":
        raise ImageFormatError("missing P5 magic", 0)
    pos = 2
    fields, starts = [], []
    while len(fields) < 3:
        # whitespace and comments
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("expected an integer header field", start)
        fields.append(int(data[start:pos]))
        starts.append(start)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("expected whitespace after header", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}", starts[0] if w < 1 else starts[1])
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad maxval {maxval}", starts[2])
    nbytes = 1 if maxval < 256 else 2
    need = w * h * nbytes
    if len(data) - pos < need:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes, have {len(data) - pos}", len(data))
    dtype = np.uint8 if nbytes == 1 else np.dtype(">u2")
    px = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).astype(np.float64)
    return (px / maxval).reshape(h, w)


def save_image(tensor, path) -> None:
    values = tensor.values if isinstance(tensor, Tensor) else np.asarray(tensor)
    if values.ndim == 4:
        if values.shape[:2] != (1, 1):
            raise ValueError(f"save_image expects (1, 1, h, w), got {values.shape}")
        values = values[0, 0]
    Path(path).write_bytes(encode_pgm(values))


def load_image(path) -> Tensor:
    """Load a grayscale PGM (or PNG) as a (1, 1, h, w) tensor with values in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    else:
        arr = decode_pgm(data)
    return Tensor(arr[None, None])


# -- manifest ---------------------------------------------------------------

@dataclass
class ManifestRecord:
    identifier: str
    path: str  # relative to the manifest's directory
    spec: Optional[dict]  # None for external images


@dataclass
class DatasetManifest:
    records: list
    seed: int
    content_hash: str = ""
    root: Path = field(default_factory=Path)

    def image_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.path

    def compute_hash(self) -> str:
        h = hashlib.sha256()
        for rec in self.records:
            h.update(rec.identifier.encode("utf-8") + b"\0")
            h.update(self.image_path(rec).read_bytes())
        return h.hexdigest()

    def write(self, path) -> None:
        path = Path(path)
        lines = [f"{_HEADER_PREFIX}\tseed={self.seed}\tcount={len(self.records)}\thash={self.content_hash}"]
        for rec in self.records:
            spec = "external" if rec.spec is None else json.dumps(rec.spec, sort_keys=True, separators=(",", ":"))
            lines.append(f"{rec.identifier}\t{rec.path}\t{spec}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path, verify: bool = False) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(_HEADER_PREFIX):
            raise ManifestError(f"{path}: missing manifest header")
        meta = dict(re.findall(r"(\w+)=(\S*)", lines[0]))
        records, seen = [], set()
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{n}: expected 3 tab-separated fields")
            ident, rel, spec = parts
            if ident in seen:
                raise ManifestError(f"{path}:{n}: duplicate identifier {ident}")
            seen.add(ident)
            records.append(ManifestRecord(ident, rel, None if spec == "external" else json.loads(spec)))
        m = cls(records, int(meta.get("seed", 0)), meta.get("hash", ""), path.parent)
        if verify and m.compute_hash() != m.content_hash:
            raise ManifestError(f"{path}: content hash mismatch")
        return m


def generate_dataset(count: int, seed: int, out_dir, duplicate_fraction: float = 0.1) -> DatasetManifest:
    """Write ``count`` synthetic 64x64 marks plus ``manifest.tsv`` into ``out_dir``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_dup = int(round(duplicate_fraction * count)) if count > 1 else 0
    dup_idx = set(int(i) for i in rng.choice(np.arange(1, count), size=n_dup, replace=False)) if n_dup else set()
    specs: list = []
    originals: list = []
    for i in range(count):
        if i in dup_idx and originals:
            src = originals[int(rng.integers(len(originals)))]
            spec = jitter_mark_spec(specs[src], rng)
            spec["duplicate_of"] = f"mark_{src:05d}"
        else:
            spec = random_mark_spec(rng)
            originals.append(i)
        specs.append(spec)

    records = []
    for i, spec in enumerate(specs):
        ident = f"mark_{i:05d}"
        rel = f"{ident}.pgm"
        (out_dir / rel).write_bytes(encode_pgm(render_mark(spec)))
        records.append(ManifestRecord(ident, rel, spec))
    manifest = DatasetManifest(records, seed, root=out_dir)
    manifest.content_hash = manifest.compute_hash()
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest


class SampleStore:
    """All images of a manifest held in memory as an (N, 1, 64, 64) array."""

    def __init__(self, ids: list, images: np.ndarray, manifest: Optional[DatasetManifest] = None):
        if images.ndim != 4 or images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"images must be (N, 1, {IMAGE_SIZE}, {IMAGE_SIZE}), got {images.shape}")
        if len(ids) != len(images):
            raise ValueError("one identifier per image required")
        self.ids = list(ids)
        self.images = np.ascontiguousarray(images, dtype=np.float64)
        self.manifest = manifest
        self._pos = {k: i for i, k in enumerate(self.ids)}

    @classmethod
    def from_manifest(cls, manifest) -> "SampleStore":
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.read(manifest)
        imgs = [load_image(manifest.image_path(r)).values[0] for r in manifest.records]
        return cls([r.identifier for r in manifest.records], np.stack(imgs), manifest)

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, identifier: str) -> int:
        return self._pos[identifier]

    def image(self, i: int) -> Tensor:
        return Tensor(self.images[i:i + 1])

    def sample(self, m: int, rng: np.random.Generator) -> Tensor:
        """``m`` images drawn uniformly with replacement."""
        return Tensor(self.images[rng.integers(0, len(self.ids), size=m)])

    @property
    def manifest_hash(self) -> str:
        return self.manifest.content_hash if self.manifest is not None else ""

    def duplicate_pairs(self) -> list:
        """(source id, duplicate id) for every planted near-duplicate."""
        if self.manifest is None:
            return []
        return [(r.spec["duplicate_of"], r.identifier) for r in self.manifest.records
                if r.spec and "duplicate_of" in r.spec]
