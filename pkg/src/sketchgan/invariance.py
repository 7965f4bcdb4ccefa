"""Rotation, scale and shift sweeps measuring how stable an encoding is.

For every probe image the untransformed embedding is compared (normalised
dot product) with the embeddings of its transformed copies.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor

CENTER = 31.5  # rotation / scaling centre in pixel coordinates

SWEEP_KINDS = ("rotation", "scale", "shift")


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample a 2-D image at fractional coordinates; reads outside the image are 0."""
    h, w = img.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def _as_array(image) -> np.ndarray:
    return image.values if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)


def _map_planes(image, fn) -> Tensor:
    arr = _as_array(image)
    out = np.empty_like(arr)
    for idx in np.ndindex(*arr.shape[:-2]):
        out[idx] = fn(arr[idx])
    return Tensor(out)


def rotate(image, degrees: float) -> Tensor:
    """Rotate counter-clockwise (as displayed, rows pointing down) about the image centre."""
    if degrees == 0:
        return Tensor(_as_array(image).copy())
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)

    def one(img):
        h, w = img.shape
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        dx, dy = cc - CENTER, rr - CENTER
        # inverse map: output offset -> source offset
        sx = c * dx - s * dy
        sy = s * dx + c * dy
        return _bilinear(img, sy + CENTER, sx + CENTER)

    return _map_planes(image, one)


def rescale(image, factor: float) -> Tensor:
    """Zoom about the centre; shrinking pads with zeros, enlarging crops."""
    if factor == 1:
        return Tensor(_as_array(image).copy())
    if factor <= 0:
        raise ValueError("scale factor must be positive")

    def one(img):
        h, w = img.shape
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        return _bilinear(img, CENTER + (rr - CENTER) / factor, CENTER + (cc - CENTER) / factor)

    return _map_planes(image, one)


def shift(image, dx: int, dy: int) -> Tensor:
    """Integer translation (dx to the right, dy down); vacated pixels are 0."""
    arr = _as_array(image)
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return Tensor(out)
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = arr[..., src_r, src_c]
    return Tensor(out)


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    probes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if self.probes < 1:
            raise ValueError("probes must be >= 1")

    def points(self) -> list:
        """Sweep parameters as (param1, param2) pairs; identity point included."""
        if self.kind == "rotation":
            return [(-10 + 0.5 * i, None) for i in range(41)]
        if self.kind == "scale":
            return [(round(0.5 + 0.05 * i, 10), None) for i in range(21)]
        # rows dy, columns dx, both -10..10
        return [(dx, dy) for dy in range(-10, 11) for dx in range(-10, 11)]

    @property
    def identity(self) -> tuple:
        return {"rotation": (0.0, None), "scale": (1.0, None), "shift": (0, 0)}[self.kind]

    def apply(self, image, point) -> Tensor:
        p1, p2 = point
        if self.kind == "rotation":
            return rotate(image, p1)
        if self.kind == "scale":
            return rescale(image, p1)
        return shift(image, int(p1), int(p2))


@dataclass
class InvarianceReport:
    spec: SweepSpec
    points: list
    probe_ids: list
    raw: np.ndarray  # (probes, points)
    label: str = ""

    @property
    def mean(self) -> np.ndarray:
        return self.raw.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.raw.std(axis=0)

    def value_at(self, point) -> np.ndarray:
        return self.raw[:, self.points.index(point)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("param1", "param2", "mean_similarity", "std_similarity"))
            for (p1, p2), m, s in zip(self.points, self.mean, self.std):
                w.writerow((_fmt(p1), _fmt(p2), repr(float(m)), repr(float(s))))

    def write_raw_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("probe", "identifier", "param1", "param2", "similarity"))
            for i, ident in enumerate(self.probe_ids):
                for (p1, p2), v in zip(self.points, self.raw[i]):
                    w.writerow((i, ident, _fmt(p1), _fmt(p2), repr(float(v))))

    def shift_grid(self) -> np.ndarray:
        """21x21 mean similarity, rows dy = -10..10, columns dx = -10..10."""
        if self.spec.kind != "shift":
            raise ValueError("shift_grid is only defined for shift sweeps")
        return self.mean.reshape(21, 21)

    def write_grid_csv(self, path) -> None:
        grid = self.shift_grid()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dy\\dx"] + [str(dx) for dx in range(-10, 11)])
            for dy, row in zip(range(-10, 11), grid):
                w.writerow([str(dy)] + [repr(float(v)) for v in row])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and v.is_integer():
        return repr(v)
    return repr(v) if isinstance(v, float) else str(v)


def choose_probes(n_available: int, probes: int, seed: int) -> np.ndarray:
    if probes > n_available:
        raise ValueError(f"dataset has {n_available} samples, fewer than {probes} probes")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_available, size=probes, replace=False))


def run_sweep(enc, dataset, spec: SweepSpec, points: Optional[list] = None, label: str = "") -> InvarianceReport:
    """Similarity of each transformed probe to its untransformed self, for every sweep point.

    ``enc`` is anything with ``embed(images) -> unit rows``.
    """
    points = spec.points() if points is None else points
    idx = choose_probes(len(dataset), spec.probes, spec.seed)
    raw = np.empty((len(idx), len(points)))
    for row, i in enumerate(idx):
        img = dataset.images[i:i + 1]
        variants = np.concatenate([img] + [spec.apply(img, p).values for p in points])
        emb = enc.embed(variants)
        base, moved = emb[0], emb[1:]
        if not np.any(base):
            raw[row] = 0.0
        else:
            raw[row] = moved @ base
    return InvarianceReport(spec, list(points), [dataset.ids[i] for i in idx], raw, label)


def compare_reports(reports: dict) -> list:
    """Join several reports of the same sweep on their points.

    Returns rows ``(param1, param2, mean_<label>...)``.
    """
    labels = list(reports)
    first = reports[labels[0]]
    for lab in labels[1:]:
        if reports[lab].points != first.points:
            raise ValueError("reports cover different sweep points")
    rows = []
    for j, (p1, p2) in enumerate(first.points):
        rows.append((p1, p2) + tuple(float(reports[lab].mean[j]) for lab in labels))
    return rows


def write_comparison_csv(per_kind: dict, path) -> None:
    """``per_kind`` maps sweep kind -> {label: report}."""
    labels = None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for kind, reports in per_kind.items():
            if labels is None:
                labels = list(reports)
                w.writerow(["sweep", "param1", "param2"] + [f"mean_{lab}" for lab in labels])
            for row in compare_reports({lab: reports[lab] for lab in labels}):
                w.writerow([kind, _fmt(row[0]), _fmt(row[1])] + [repr(v) for v in row[2:]])


def ordering_summary(per_kind: dict, better: str, worse: str) -> dict:
    """Per sweep: mean over points of (similarity[better] - similarity[worse])."""
    out = {}
    for kind, reports in per_kind.items():
        diff = reports[better].mean - reports[worse].mean
        out[kind] = float(diff.mean())
    return out
