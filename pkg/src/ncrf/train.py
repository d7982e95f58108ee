"""Training loop shared by the NCRF and baseline arms."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import checkpoint
from . import numerics as nx
from .config import RunConfig
from .crf import crf_loss
from .extractor import ExtractorParams, normalize_pixels, predict_marginals
from .slides import PatchSample, SlideRecord, augment, extract_superpatch, load_manifest, sample_patches

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "split", "loss", "accuracy", "seconds"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ExtractorParams
    valid_accuracy: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    losses: list = field(default_factory=list)


class MetricsLog:
    """Append-only CSV of per-step training rows and per-epoch validation rows."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])


def _batch(samples: Sequence[PatchSample], slides: dict, cfg: RunConfig,
           rng: Optional[np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    crops, labels = [], []
    for s in samples:
        rec = slides[s.slide_id]
        sp = extract_superpatch(rec.pixels, rec.tumor, (s.x, s.y), cfg.g, cfg.patch)
        if rng is not None:
            sp = augment(sp, rng, cfg.max_brightness, cfg.max_contrast)
        crops.append(sp.pixels)
        labels.append(sp.labels.reshape(-1))
    return normalize_pixels(np.stack(crops)), np.stack(labels)


def evaluate(params: ExtractorParams, x: np.ndarray, y: np.ndarray, cfg: RunConfig,
             batch: int = 100) -> tuple[float, float]:
    """(mean loss, patch accuracy) without gradients; accuracy compares argmax marginals to labels."""
    losses, hits = [], 0
    for i in range(0, len(x), batch):
        q = predict_marginals(x[i : i + batch], params, T=cfg.T)
        losses.append(crf_loss(q, y[i : i + batch]).item() * y[i : i + batch].size)
        hits += int((q.data.argmax(-1) == y[i : i + batch]).sum())
    return float(np.sum(losses) / y.size), hits / y.size


def train(cfg: RunConfig, data_dir: Union[str, Path], out_dir: Optional[Union[str, Path]] = None,
          seed: Optional[int] = None, slides: Optional[Sequence[SlideRecord]] = None) -> TrainResult:
    """Train one arm (``cfg.crf_enabled`` selects NCRF or baseline) for one seed.

    Initialisation, patch sampling and augmentation draw from independent
    streams derived from ``seed``, so the two arms see identical data.
    """
    seed = cfg.seeds[0] if seed is None else seed
    init_ss, sample_ss, aug_ss, valid_ss = np.random.SeedSequence(seed).spawn(4)
    records = list(slides) if slides is not None else load_manifest(data_dir, ("train", "valid"))
    by_id = {r.slide_id: r for r in records}
    train_slides = [r for r in records if r.split == "train"]
    valid_slides = [r for r in records if r.split == "valid"]
    if not train_slides:
        raise TrainingError(f"no training slides under {data_dir}")

    samples = sample_patches(train_slides, cfg.n_pos, cfg.n_neg, cfg.hard_frac, cfg.boundary_radius,
                             seed=int(sample_ss.generate_state(1)[0]), footprint=cfg.footprint)
    valid_x = valid_y = None
    if valid_slides and cfg.n_valid_pos + cfg.n_valid_neg > 0:
        vs = sample_patches(valid_slides, cfg.n_valid_pos, cfg.n_valid_neg, 0.0, cfg.boundary_radius,
                            seed=int(valid_ss.generate_state(1)[0]), footprint=cfg.footprint)
        with nx.precision(cfg.precision):
            valid_x, valid_y = _batch(vs, by_id, cfg, None)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        cfg.echo(out)
    log = MetricsLog(out / "metrics.csv" if out is not None else None)

    with nx.precision(cfg.precision):
        arch = cfg.architecture()
        params = ExtractorParams.initialize(arch, seed=int(init_ss.generate_state(1)[0]))
        opt = nx.SGD(params.trainable(freeze_crf=cfg.freeze_crf), lr=cfg.lr, momentum=cfg.momentum)
        aug_rng = np.random.default_rng(aug_ss) if cfg.augment else None
        order_rng = np.random.default_rng(sample_ss.spawn(1)[0])
        result = TrainResult(params)
        start = time.perf_counter()
        step = 0
        meta = {"config_hash": cfg.digest(), "seed": seed}
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(samples))
            hits = count = 0
            for i in range(0, len(order), cfg.batch_size):
                batch = [samples[k] for k in order[i : i + cfg.batch_size]]
                x, y = _batch(batch, by_id, cfg, aug_rng)
                try:
                    with nx.GradientTape() as tape:
                        q = predict_marginals(x, params, T=cfg.T)
                        loss = crf_loss(q, y)
                    grads = tape.gradient(loss, opt.params)
                    opt.step(grads)
                except nx.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value at epoch {epoch} step {step} "
                                        f"(seed {seed}, lr {cfg.lr}): {exc}") from exc
                step += 1
                acc = float((q.data.argmax(-1) == y).mean())
                hits += int((q.data.argmax(-1) == y).sum())
                count += y.size
                result.losses.append(loss.item())
                log.append(step=step, epoch=epoch, split="train", loss=f"{loss.item():.6f}",
                           accuracy=f"{acc:.6f}", seconds=f"{time.perf_counter() - start:.3f}")
            result.train_accuracy.append(hits / max(count, 1))
            if valid_x is not None:
                v_loss, v_acc = evaluate(params, valid_x, valid_y, cfg)
                result.valid_accuracy.append(v_acc)
                log.append(step=step, epoch=epoch, split="valid", loss=f"{v_loss:.6f}",
                           accuracy=f"{v_acc:.6f}", seconds=f"{time.perf_counter() - start:.3f}")
                logger.info("seed %d epoch %d: train acc %.4f valid acc %.4f", seed, epoch,
                            result.train_accuracy[-1], v_acc)
            if out is not None:
                checkpoint.save(out / f"epoch_{epoch:03d}.ncrf", params, {**meta, "epoch": epoch})
        if out is not None:
            checkpoint.save(out / "model.ncrf", params, {**meta, "epoch": cfg.epochs - 1})
    return result
