"""Slide-level probability maps, non-maximum suppression, lesions and FROC."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .extractor import ExtractorParams, normalize_pixels, predict_marginals
from .slides import extract_superpatch, write_pgm

logger = logging.getLogger(__name__)

FROC_FP_RATES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


class FrocError(ValueError):
    pass


@dataclass
class ProbabilityMap:
    """Tumor probabilities on a regular grid; cell (r, c) sits at pixel (origin + c*stride, origin + r*stride)."""

    probs: np.ndarray  # [rows, cols]
    evaluated: np.ndarray  # bool [rows, cols]
    stride: int = 64
    origin: tuple = (32, 32)  # (x, y) of cell (0, 0)

    def cell_xy(self, row, col) -> tuple:
        return self.origin[0] + col * self.stride, self.origin[1] + row * self.stride

    def masked(self) -> np.ndarray:
        return np.where(self.evaluated, self.probs, 0.0)

    def write_csv(self, path: Union[str, Path]) -> None:
        rows, cols = np.nonzero(self.evaluated)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["cell_x", "cell_y", "prob"])
            for r, c in zip(rows, cols):
                out.writerow([int(c), int(r), repr(float(self.probs[r, c]))])
        Path(path).with_suffix(".json").write_text(json.dumps(
            {"stride": self.stride, "origin": list(self.origin), "shape": list(self.probs.shape)}, sort_keys=True))

    def write_pgm(self, path: Union[str, Path]) -> None:
        write_pgm(path, np.rint(self.masked() * 255).astype(np.uint8))

    @classmethod
    def read_csv(cls, path: Union[str, Path], stride: Optional[int] = None,
                 shape: Optional[tuple] = None) -> "ProbabilityMap":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        stride = int(meta.get("stride", stride or 64))
        origin = tuple(meta.get("origin", (stride // 2, stride // 2)))
        cells = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["cell_x", "cell_y", "prob"]:
                raise ValueError(f"{path}:1: expected header cell_x,cell_y,prob, got {header}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    cx, cy, p = int(row[0]), int(row[1]), float(row[2])
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
                cells.append((cx, cy, p))
        shape = tuple(meta.get("shape", shape or (
            (max((c[1] for c in cells), default=-1) + 1, max((c[0] for c in cells), default=-1) + 1))))
        probs = np.zeros(shape)
        evaluated = np.zeros(shape, dtype=bool)
        for cx, cy, p in cells:
            probs[cy, cx] = p
            evaluated[cy, cx] = True
        return cls(probs, evaluated, stride, origin)


def infer_probability_map(params: ExtractorParams, slide: np.ndarray, tissue_mask: np.ndarray, stride: int = 64,
                          T: int = 10, crf_enabled: Optional[bool] = None, batch_size: int = 64,
                          workers: int = 1) -> ProbabilityMap:
    """Slide the g x g model over the slide and keep the centre patch's tumor marginal per cell.

    Cells whose super-patch footprint leaves the slide or whose centre is not
    tissue are left unevaluated.  Cells are processed in fixed chunks, so the
    result does not depend on ``workers``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    g, p = params.arch.g, params.arch.patch
    side = g * p
    h, w = slide.shape
    origin = stride // 2
    rows = max((h - origin + stride - 1) // stride, 0)
    cols = max((w - origin + stride - 1) // stride, 0)
    probs = np.zeros((rows, cols))
    evaluated = np.zeros((rows, cols), dtype=bool)
    cells = []
    for r in range(rows):
        y = origin + r * stride
        for c in range(cols):
            x = origin + c * stride
            top, left = y - side // 2, x - side // 2
            if top < 0 or left < 0 or top + side > h or left + side > w or not tissue_mask[y, x]:
                continue
            cells.append((r, c))
    centre = (g * g) // 2

    def run(chunk):
        crops = np.stack([
            extract_superpatch(slide, None, (origin + c * stride, origin + r * stride), g, p).pixels
            for r, c in chunk
        ])
        q = predict_marginals(normalize_pixels(crops), params, T=T, crf_enabled=crf_enabled)
        return q.data[:, centre, 1]

    chunks = [cells[i : i + batch_size] for i in range(0, len(cells), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(ch) for ch in chunks]
    for chunk, res in zip(chunks, results):
        for (r, c), v in zip(chunk, res):
            probs[r, c] = float(v)
            evaluated[r, c] = True
    return ProbabilityMap(probs, evaluated, stride, (origin, origin))


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    prob: float


def nms(pmap: ProbabilityMap, radius: float, prob_floor: float = 0.05) -> list[Detection]:
    """Greedy non-maximum suppression on the map.

    Repeatedly emits the highest remaining cell (raster order breaks ties)
    and suppresses every cell closer than ``radius`` pixels to it.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0.0 <= prob_floor < 1.0:
        raise ValueError("prob_floor must lie in [0, 1)")
    residual = np.where(pmap.evaluated, pmap.probs, -np.inf).ravel()
    rows, cols = pmap.probs.shape
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    xs = pmap.origin[0] + cc * pmap.stride
    ys = pmap.origin[1] + rr * pmap.stride
    out = []
    while residual.size:
        k = int(np.argmax(residual))
        if not residual[k] >= prob_floor:
            break
        out.append(Detection(float(xs[k]), float(ys[k]), float(pmap.probs.flat[k])))
        close = (xs - xs[k]) ** 2 + (ys - ys[k]) ** 2 < radius * radius
        residual[close] = -np.inf
    return out


def write_detections(path: Union[str, Path], detections: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y", "prob"])
        for d in detections:
            out.writerow([repr(d.x), repr(d.y), repr(d.prob)])


def read_detections(path: Union[str, Path]) -> list[Detection]:
    dets = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "prob"]:
            raise ValueError(f"{path}:1: expected header x,y,prob, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                dets.append(Detection(float(row[0]), float(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
    return dets


@dataclass
class LesionSet:
    labels: np.ndarray  # int raster, 0 = background, k = lesion id

    @property
    def count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def lesion_at(self, x: float, y: float) -> int:
        xi, yi = int(round(x)), int(round(y))
        h, w = self.labels.shape
        if 0 <= yi < h and 0 <= xi < w:
            return int(self.labels[yi, xi])
        return 0


def connected_components(mask: np.ndarray) -> LesionSet:
    """8-connected components; ids increase with the raster position of each component's first pixel."""
    labels, _ = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3), dtype=int))
    return LesionSet(labels)


@dataclass
class FrocCurve:
    fp_per_slide: np.ndarray
    sensitivity: np.ndarray
    score: float
    at_targets: tuple

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["fp_per_slide", "sensitivity"])
            for fp, s in zip(self.fp_per_slide, self.sensitivity):
                out.writerow([repr(float(fp)), repr(float(s))])
            fh.write(f"# average_froc={self.score:.6f}\n")


def froc(detections: Sequence[Sequence[Detection]], lesions: Sequence[LesionSet],
         n_slides: Optional[int] = None) -> FrocCurve:
    """Lesion-level FROC over a threshold sweep and its average at 1/4 ... 8 FPs per slide.

    A detection inside a lesion marks that lesion found (repeat hits are
    neither extra detections nor false positives); any other detection is a
    false positive.  Between sweep points the curve is a step function.
    """
    n_slides = len(detections) if n_slides is None else n_slides
    if len(detections) != len(lesions):
        raise ValueError("need one detection list per lesion set")
    total = int(sum(ls.count for ls in lesions))
    if total == 0:
        raise FrocError("zero lesions: sensitivity is undefined")
    events = []  # (prob, slide, lesion id or 0)
    for s, (dets, ls) in enumerate(zip(detections, lesions)):
        for d in dets:
            events.append((d.prob, s, ls.lesion_at(d.x, d.y)))
    events.sort(key=lambda e: -e[0])
    fps, sens = [0.0], [0.0]
    found = set()
    n_fp = 0
    i = 0
    while i < len(events):
        j = i
        while j < len(events) and events[j][0] == events[i][0]:
            prob, s, lesion = events[j]
            if lesion:
                found.add((s, lesion))
            else:
                n_fp += 1
            j += 1
        fps.append(n_fp / n_slides)
        sens.append(len(found) / total)
        i = j
    fps_a, sens_a = np.asarray(fps), np.asarray(sens)
    at = tuple(float(sens_a[fps_a <= t].max()) for t in FROC_FP_RATES)
    return FrocCurve(fps_a, sens_a, float(np.mean(at)), at)


def total_variation(pmap: ProbabilityMap) -> float:
    """Mean |difference| over horizontally and vertically adjacent evaluated cells."""
    p, ev = pmap.probs, pmap.evaluated
    diffs = []
    h_pairs = ev[:, 1:] & ev[:, :-1]
    v_pairs = ev[1:, :] & ev[:-1, :]
    diffs.append(np.abs(p[:, 1:] - p[:, :-1])[h_pairs])
    diffs.append(np.abs(p[1:, :] - p[:-1, :])[v_pairs])
    allv = np.concatenate(diffs)
    return float(allv.mean()) if allv.size else 0.0
