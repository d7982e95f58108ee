"""Synthetic slides, tissue masking, patch sampling and augmentation.

Slides are 8-bit grayscale rasters with a bright background and darker
textured tissue.  Tumor regions are unions of ellipses placed inside the
tissue; they are darker and carry dense nucleus-like speckle.  Normal tissue
contains a few small tumor-looking clusters and tumors contain a few pale
spots, so a patch classifier that ignores context makes isolated mistakes.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class SamplingError(RuntimeError):
    pass


class GeometryError(ValueError):
    pass


# -- raster I/O -------------------------------------------------------------


def write_pgm(path: Union[str, Path], raster: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"PGM rasters are 2-d, got shape {raster.shape}")
    if raster.dtype == bool:
        raster = raster.astype(np.uint8) * 255
    raster = raster.astype(np.uint8)
    h, w = raster.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + raster.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(blob, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


# -- synthetic slides -------------------------------------------------------


@dataclass
class SlideParams:
    width: int = 2048
    height: int = 2048
    n_tumor_blobs: int = 3
    superpatch: int = 96
    background_mean: float = 242.0
    background_std: float = 3.0
    tissue_mean: float = 178.0
    tissue_texture_std: float = 7.0
    grain_std: float = 5.0
    tumor_mean: float = 158.0
    nucleus_density: float = 0.006
    tumor_nucleus_density: float = 0.03
    nucleus_depth: float = 260.0
    tumor_radius: tuple = (0.04, 0.10)
    tumor_fraction: tuple = (0.02, 0.30)
    mimic_per_mpx: float = 8.0
    mimic_radius: tuple = (8, 18)
    pale_per_mpx: float = 6.0
    pale_radius: tuple = (8, 18)
    max_attempts: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "SlideParams":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("tumor_radius", "tumor_fraction", "mimic_radius", "pale_radius"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass
class SlideRaster:
    pixels: np.ndarray
    slide_id: str = ""
    tissue_truth: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _smooth_field(rng, shape, coarse: int) -> np.ndarray:
    small = ndimage.gaussian_filter(rng.standard_normal((coarse, coarse)), sigma=coarse / 12, mode="wrap")
    small /= small.std() + 1e-12
    return ndimage.zoom(small, (shape[0] / coarse, shape[1] / coarse), order=1)[: shape[0], : shape[1]]


def _tissue_region(rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    ry = (yy - h / 2) / (h / 2)
    rx = (xx - w / 2) / (w / 2)
    field = 0.55 - (rx**2 + ry**2) + 0.25 * _smooth_field(rng, (h, w), 48)
    tissue = field > 0
    labels, n = ndimage.label(tissue)
    if n > 1:
        sizes = ndimage.sum_labels(tissue, labels, index=np.arange(1, n + 1))
        tissue = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(tissue)


def _disks(rng, shape, candidates: np.ndarray, count: int, radius: tuple) -> np.ndarray:
    """Union of ``count`` disks centred on random pixels drawn from ``candidates`` (flat indices)."""
    out = np.zeros(shape, dtype=bool)
    if count <= 0 or candidates.size == 0:
        return out
    centres = rng.choice(candidates, size=count)
    radii = rng.uniform(radius[0], radius[1], size=count)
    for c, r in zip(centres, radii):
        cy, cx = divmod(int(c), shape[1])
        r_int = int(np.ceil(r))
        y0, y1 = max(cy - r_int, 0), min(cy + r_int + 1, shape[0])
        x0, x1 = max(cx - r_int, 0), min(cx + r_int + 1, shape[1])
        yy, xx = np.mgrid[y0:y1, x0:x1]
        out[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return out


def _tumor_blobs(rng, tissue: np.ndarray, params: SlideParams) -> np.ndarray:
    h, w = tissue.shape
    side = min(h, w)
    depth = ndimage.distance_transform_edt(tissue)
    tumor = np.zeros_like(tissue)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(params.n_tumor_blobs):
        a = rng.uniform(*params.tumor_radius) * side
        b = a * rng.uniform(0.6, 1.0)
        inside = np.flatnonzero(depth.ravel() > a + 2)
        if inside.size == 0:
            raise GeometryError("tissue region too small to hold a tumor blob of the requested size")
        cy, cx = divmod(int(rng.choice(inside)), w)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        tumor |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return tumor & tissue


def _speckle(rng, shape, density: np.ndarray, depth: float) -> np.ndarray:
    seeds = rng.random(shape) < density
    return depth * ndimage.gaussian_filter(seeds.astype(np.float64), sigma=1.2)


def generate_synthetic_slide(seed: int, params: Optional[SlideParams] = None,
                             slide_id: str = "") -> tuple[SlideRaster, np.ndarray]:
    """Deterministic synthetic slide and its boolean tumor mask.

    The tumor fraction of tissue is kept inside ``params.tumor_fraction`` by
    redrawing the blobs.
    """
    params = params or SlideParams()
    h, w = params.height, params.width
    if min(h, w) < 8 * params.superpatch:
        raise GeometryError(f"slide {w}x{h} is smaller than 8 super-patch sides ({8 * params.superpatch})")
    rng = np.random.default_rng(seed)
    tissue = _tissue_region(rng, h, w)
    if params.n_tumor_blobs == 0:
        tumor = np.zeros_like(tissue)
    else:
        for _ in range(params.max_attempts):
            tumor = _tumor_blobs(rng, tissue, params)
            frac = tumor.sum() / tissue.sum()
            if params.tumor_fraction[0] <= frac <= params.tumor_fraction[1]:
                break
        else:
            raise GeometryError(f"could not reach tumor fraction {params.tumor_fraction} "
                                f"in {params.max_attempts} attempts")

    mpx = h * w / 1e6
    normal_idx = np.flatnonzero((tissue & ~tumor).ravel())
    tumor_idx = np.flatnonzero(tumor.ravel())
    mimic = _disks(rng, (h, w), normal_idx, rng.poisson(params.mimic_per_mpx * mpx), params.mimic_radius)
    pale = _disks(rng, (h, w), tumor_idx, rng.poisson(params.pale_per_mpx * mpx), params.pale_radius)
    tumor_look = (tumor & ~pale) | (mimic & tissue & ~tumor)

    base = np.where(tumor_look, params.tumor_mean, params.tissue_mean)
    texture = params.tissue_texture_std * _smooth_field(rng, (h, w), 96)
    density = np.where(tumor_look, params.tumor_nucleus_density, params.nucleus_density)
    nuclei = _speckle(rng, (h, w), density, params.nucleus_depth)
    grain = params.grain_std * rng.standard_normal((h, w))
    tissue_px = base + texture - nuclei + grain
    background = params.background_mean + params.background_std * rng.standard_normal((h, w))
    pixels = np.where(tissue, tissue_px, np.clip(background, 230, 255))
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return SlideRaster(pixels, slide_id, tissue_truth=tissue), tumor


# -- tissue masking ---------------------------------------------------------


def otsu_threshold(slide) -> tuple[int, np.ndarray]:
    """Otsu threshold over the 256-bin histogram and the tissue mask ``pixels < threshold``.

    Class 0 is ``v < t``; the lowest maximising ``t`` wins ties.  A constant
    image has no threshold and yields an empty mask.
    """
    pixels = slide.pixels if isinstance(slide, SlideRaster) else np.asarray(slide)
    if pixels.size == 0:
        raise ValueError("empty raster")
    hist = np.bincount(pixels.ravel().astype(np.int64), minlength=256)
    hist_l = [int(c) for c in hist]
    n = pixels.size
    # integer prefix sums; score = (S0*N - S*n0)^2 / (n0*n1)
    n0 = np.cumsum(hist_l, dtype=object)
    s0 = np.cumsum([v * c for v, c in enumerate(hist_l)], dtype=object)
    total = s0[-1]
    best_t, best = None, None
    for t in range(1, 256):
        a, sa = n0[t - 1], s0[t - 1]
        b = n - a
        if a == 0 or b == 0:
            continue
        score = Fraction((sa * n - total * a) ** 2, a * b)
        if best is None or score > best:
            best_t, best = t, score
    if best_t is None:
        logger.warning("otsu_threshold: constant image, returning an empty tissue mask")
        return 0, np.zeros(pixels.shape, dtype=bool)
    return best_t, pixels < best_t


# -- slide records, manifest ------------------------------------------------


@dataclass
class SlideRecord:
    slide_id: str
    pixels: np.ndarray
    tumor: np.ndarray
    split: str = "train"
    _tissue: Optional[np.ndarray] = field(default=None, repr=False)
    _near: dict = field(default_factory=dict, repr=False)

    @property
    def tissue(self) -> np.ndarray:
        if self._tissue is None:
            self._tissue = otsu_threshold(self.pixels)[1]
        return self._tissue

    def near_boundary(self, radius: float) -> np.ndarray:
        """Pixels within ``radius`` of a tissue/background or tumor/normal boundary."""
        if radius not in self._near:
            edges = np.zeros(self.pixels.shape, dtype=bool)
            for m in (self.tissue, self.tumor):
                dy = m[1:, :] != m[:-1, :]
                dx = m[:, 1:] != m[:, :-1]
                edges[1:, :] |= dy
                edges[:-1, :] |= dy
                edges[:, 1:] |= dx
                edges[:, :-1] |= dx
            if edges.any():
                self._near[radius] = ndimage.distance_transform_edt(~edges) <= radius
            else:
                self._near[radius] = np.zeros_like(edges)
        return self._near[radius]


def write_dataset(out_dir: Union[str, Path], n_slides: int, split_ratio: Sequence[float], seed: int,
                  params: Optional[SlideParams] = None) -> dict:
    """Generate ``n_slides`` slides plus masks as PGM files and a manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = params or SlideParams()
    counts = split_counts(n_slides, split_ratio)
    splits = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    slide_seeds = np.random.SeedSequence(seed).generate_state(max(n_slides, 1), dtype=np.uint32)
    entries = []
    for i, split in enumerate(splits):
        sid = f"slide_{i:03d}"
        raster, tumor = generate_synthetic_slide(int(slide_seeds[i]), params, sid)
        write_pgm(out / f"{sid}.pgm", raster.pixels)
        write_pgm(out / f"{sid}_mask.pgm", tumor)
        entries.append({"slide": f"{sid}.pgm", "mask": f"{sid}_mask.pgm", "split": split})
    manifest = {
        "slides": entries,
        "provenance": {"seed": seed, "n_slides": n_slides, "split_ratio": list(split_ratio),
                       "params": asdict(params)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def split_counts(n: int, ratio: Sequence[float]) -> list[int]:
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or (ratio < 0).any() or ratio.sum() <= 0:
        raise ValueError(f"split_ratio must be three non-negative weights, got {list(ratio)}")
    raw = n * ratio / ratio.sum()
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def load_manifest(path: Union[str, Path], splits: Optional[Sequence[str]] = None) -> list[SlideRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    records = []
    for entry in manifest["slides"]:
        if splits is not None and entry["split"] not in splits:
            continue
        pixels = read_pgm(path.parent / entry["slide"])
        mask = read_pgm(path.parent / entry["mask"]) > 0
        if pixels.shape != mask.shape:
            raise ValueError(f"{entry['slide']}: mask shape {mask.shape} differs from slide {pixels.shape}")
        records.append(SlideRecord(Path(entry["slide"]).stem, pixels, mask, entry["split"]))
    return records


# -- patch sampling ---------------------------------------------------------


@dataclass(frozen=True)
class PatchSample:
    slide_id: str
    x: int
    y: int
    label: int
    hard: bool = False


def _inside(shape, footprint: int) -> np.ndarray:
    """Centres whose footprint x footprint square stays inside the slide."""
    h, w = shape
    half = footprint // 2
    ok = np.zeros(shape, dtype=bool)
    ok[half : h - footprint + half + 1, half : w - footprint + half + 1] = True
    return ok


def sample_patches(slides: Sequence[SlideRecord], n_pos: int, n_neg: int, hard_frac: float = 0.0,
                   boundary_radius: float = 64, seed: int = 0, footprint: int = 96) -> list[PatchSample]:
    """Pick a slide at random, then a centre at random within the eligible region.

    Positives come from the tumor mask; negatives from tissue outside it, a
    ``hard_frac`` share of them restricted to pixels near a tissue or tumor
    boundary.  Every footprint lies fully inside its slide.
    """
    if n_pos < 0 or n_neg < 0 or not 0.0 <= hard_frac <= 1.0:
        raise ValueError("counts must be >= 0 and hard_frac in [0, 1]")
    rng = np.random.default_rng(seed)
    n_hard = int(round(n_neg * hard_frac))
    pools = {"pos": [], "neg": [], "hard": []}
    for rec in slides:
        inside = _inside(rec.pixels.shape, footprint)
        neg = rec.tissue & ~rec.tumor & inside
        pools["pos"].append(np.flatnonzero(rec.tumor & inside))
        pools["neg"].append(np.flatnonzero(neg))
        pools["hard"].append(np.flatnonzero(neg & rec.near_boundary(boundary_radius)) if n_hard else np.empty(0, int))

    samples: list[PatchSample] = []
    for kind, count, label in (("pos", n_pos, 1), ("neg", n_neg - n_hard, 0), ("hard", n_hard, 0)):
        if count == 0:
            continue
        usable = [k for k, pool in enumerate(pools[kind]) if pool.size]
        if not usable:
            names = ", ".join(r.slide_id or "<unnamed>" for r in slides)
            raise SamplingError(f"cannot draw {count} {kind} patches: no eligible centres on slide(s) {names}")
        picks = rng.choice(usable, size=count)
        for k in picks:
            rec = slides[k]
            flat = int(pools[kind][k][rng.integers(pools[kind][k].size)])
            y, x = divmod(flat, rec.pixels.shape[1])
            samples.append(PatchSample(rec.slide_id, x, y, label, hard=kind == "hard"))
    return samples


# -- super-patches and augmentation -----------------------------------------


@dataclass
class SuperPatch:
    pixels: np.ndarray  # uint8 [g*p, g*p]
    labels: Optional[np.ndarray]  # int [g, g]
    center: tuple = (0, 0)  # (x, y) on the source slide


def extract_superpatch(slide: np.ndarray, mask: Optional[np.ndarray], center, g: int, p: int) -> SuperPatch:
    """Crop the g*p square centred at ``center`` = (x, y); label each patch by the mask at its own centre."""
    slide = slide.pixels if isinstance(slide, SlideRaster) else slide
    x, y = int(center[0]), int(center[1])
    side = g * p
    top, left = y - side // 2, x - side // 2
    h, w = slide.shape
    if top < 0 or left < 0 or top + side > h or left + side > w:
        raise GeometryError(f"super-patch of side {side} at ({x}, {y}) exits the {w}x{h} slide")
    crop = slide[top : top + side, left : left + side].copy()
    labels = None
    if mask is not None:
        centres = np.arange(g) * p + p // 2
        labels = mask[top + centres[:, None], left + centres[None, :]].astype(np.int64)
    return SuperPatch(crop, labels, (x, y))


def dihedral(a: np.ndarray, rotations: int, flip: bool) -> np.ndarray:
    """Optional horizontal flip followed by ``rotations`` clockwise quarter turns."""
    if flip:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, k=-(rotations % 4)))


def jitter(pixels: np.ndarray, brightness: float = 0.0, contrast: float = 1.0) -> np.ndarray:
    """Brightness shift then contrast scaling about the mean, both clamped to [0, 255]."""
    out = np.clip(pixels.astype(np.float64) + brightness, 0, 255)
    if contrast != 1.0:
        out = np.clip(contrast * out + (1 - contrast) * out.mean(), 0, 255)
    return np.rint(out).astype(np.uint8)


def apply_augmentation(sp: SuperPatch, rotations: int = 0, flip: bool = False, brightness: float = 0.0,
                       contrast: float = 1.0) -> SuperPatch:
    pixels = jitter(dihedral(sp.pixels, rotations, flip), brightness, contrast)
    labels = None if sp.labels is None else dihedral(sp.labels, rotations, flip)
    return SuperPatch(pixels, labels, sp.center)


def augment(sp: SuperPatch, rng: np.random.Generator, max_brightness: float = 64.0,
            max_contrast: float = 0.75) -> SuperPatch:
    """One of the 8 dihedral transforms (pixels and labels jointly) plus brightness/contrast jitter."""
    if sp.pixels.shape[0] != sp.pixels.shape[1]:
        raise GeometryError("augmentation needs a square super-patch")
    t = int(rng.integers(8))
    brightness = float(rng.uniform(-max_brightness, max_brightness))
    contrast = float(rng.uniform(1 - max_contrast, 1 + max_contrast))
    return apply_augmentation(sp, rotations=t % 4, flip=t >= 4, brightness=brightness, contrast=contrast)
