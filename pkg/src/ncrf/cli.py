"""Command-line entry point: ``ncrf {synth,train,infer,detect,froc,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from . import numerics as nx
from .config import RunConfig
from .crf import crf_loss
from .detect import (FrocError, ProbabilityMap, connected_components, froc, infer_probability_map, nms,
                     read_detections, write_detections)
from .extractor import CRF_WEIGHT, ExtractorParams, normalize_pixels, predict_marginals
from .slides import SlideParams, load_manifest, otsu_threshold, read_pgm, write_dataset
from .train import TrainingError, train

GRADCHECK_TOLERANCE = 1e-3


class CliError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    base = RunConfig.load(args.config).to_dict()
    for key, value in args.overrides or []:
        if key not in base:
            raise CliError(f"unknown configuration key {key!r}")
        base[key] = value
    if args.no_crf:
        base["crf_enabled"] = False
    if args.precision is not None:
        base["precision"] = args.precision
    return RunConfig.from_dict(base)


def _seed(args: argparse.Namespace, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else int(cfg.seeds[0])


def _out(args: argparse.Namespace, cfg: RunConfig) -> Path:
    if args.out is None:
        raise CliError("--out DIR is required")
    out = Path(args.out)
    cfg.echo(out)
    return out


# -- commands ---------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out(args, cfg)
    manifest = write_dataset(out, cfg.n_slides, cfg.split_ratio, _seed(args, cfg), SlideParams.from_dict(cfg.slide))
    counts = {}
    for entry in manifest["slides"]:
        counts[entry["split"]] = counts.get(entry["split"], 0) + 1
    print(f"wrote {len(manifest['slides'])} slides to {out} {counts}")
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out(args, cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    records = load_manifest(args.data, ("train", "valid"))
    for seed in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        result = train(cfg, args.data, run_dir, seed=seed, slides=records)
        arm = "ncrf" if cfg.crf_enabled else "baseline"
        last = f"{result.valid_accuracy[-1]:.4f}" if result.valid_accuracy else "n/a"
        print(f"{arm} seed {seed}: final valid accuracy {last}, checkpoint {run_dir / 'model.ncrf'}")
    return 0


def _load_params(path, cfg: RunConfig) -> ExtractorParams:
    try:
        params, _ = checkpoint.load(path, expect=cfg.architecture())
    except checkpoint.CheckpointError as exc:
        raise CliError(str(exc)) from exc
    return params


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out(args, cfg)
    slides = list(args.slide or [])
    if args.data is not None:
        slides += [Path(args.data) / e["slide"] for e in json.loads((Path(args.data) / "manifest.json").read_text())[
            "slides"] if e["split"] in args.split]
    if not slides:
        raise CliError("nothing to infer: pass --slide PGM or --data DIR")
    with nx.precision(cfg.precision):
        params = _load_params(args.checkpoint, cfg)
        for path in slides:
            pixels = read_pgm(path)
            _, tissue = otsu_threshold(pixels)
            pmap = infer_probability_map(params, pixels, tissue, stride=cfg.stride, T=cfg.T,
                                         crf_enabled=cfg.crf_enabled, workers=cfg.workers)
            stem = Path(path).stem
            pmap.write_csv(out / f"{stem}_map.csv")
            pmap.write_pgm(out / f"{stem}_map.pgm")
            print(f"{stem}: {int(pmap.evaluated.sum())} cells evaluated -> {out / (stem + '_map.csv')}")
    return 0


def cmd_detect(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = _out(args, cfg)
    for path in args.map:
        pmap = ProbabilityMap.read_csv(path)
        dets = nms(pmap, cfg.radius, cfg.prob_floor)
        stem = Path(path).stem.removesuffix("_map")
        write_detections(out / f"{stem}_detections.csv", dets)
        print(f"{stem}: {len(dets)} detections")
    return 0


def cmd_froc(args: argparse.Namespace, cfg: RunConfig) -> int:
    if len(args.detections) != len(args.mask):
        raise CliError("need one --mask per --detections file")
    out = _out(args, cfg)
    dets = [read_detections(p) for p in args.detections]
    lesions = [connected_components(read_pgm(p) > 0) for p in args.mask]
    if sum(len(d) for d in dets) == 0 or sum(ls.count for ls in lesions) == 0:
        raise CliError("zero lesions or detections: FROC is undefined")
    try:
        curve = froc(dets, lesions)
    except FrocError as exc:
        raise CliError(f"zero lesions or detections: {exc}") from exc
    curve.write_csv(out / "froc.csv")
    points = " ".join(f"{s:.4f}" for s in curve.at_targets)
    print(f"sensitivity at 1/4,1/2,1,2,4,8 FP/slide: {points}")
    print(f"average FROC {curve.score:.4f}")
    return 0


def gradcheck_instance(cfg: RunConfig, seed: int, identical: bool = False) -> tuple[ExtractorParams, np.ndarray, np.ndarray]:
    """Random small NCRF instance: parameters with non-zero w, pixels and labels for one super-patch pair."""
    rng = np.random.default_rng(seed)
    arch = cfg.architecture(crf_enabled=True)
    arch = type(arch)(g=arch.g, patch=cfg.gradcheck_patch, channels=arch.channels, crf_enabled=True,
                      compat=arch.compat)
    params = ExtractorParams.initialize(arch, seed=seed)
    params[CRF_WEIGHT].data[...] = rng.uniform(-0.5, 0.5, size=params[CRF_WEIGHT].shape)
    side = arch.g * arch.patch
    if identical:
        tile = rng.uniform(0, 255, size=(arch.patch, arch.patch))
        raw = np.tile(tile, (arch.g, arch.g))[None]
    else:
        # per-patch level and contrast so the embeddings (and hence 1 - cos) differ clearly; continuous
        # values without clipping keep max-pool ties (non-differentiable points) away
        level = rng.uniform(64, 192, size=(2, arch.g, arch.g))
        spread = rng.uniform(0.2, 1.0, size=(2, arch.g, arch.g)) * np.minimum(level, 255 - level)
        block = lambda a: np.kron(a, np.ones((arch.patch, arch.patch)))
        raw = block(level) + block(spread) * rng.uniform(-1, 1, size=(2, side, side))
    labels = rng.integers(0, 2, size=(raw.shape[0], arch.g * arch.g))
    return params, normalize_pixels(raw), labels


def run_gradcheck(cfg: RunConfig, seed: int, identical: bool = False) -> dict:
    """Max relative finite-difference error per parameter group, in 64-bit mode."""
    with nx.precision("f64"):
        params, x, y = gradcheck_instance(cfg, seed, identical)
        groups = {
            "conv": [t for n, t in params.tensors.items() if n.startswith("conv")],
            "head": [t for n, t in params.tensors.items() if n.startswith("head")],
            "w": [params[CRF_WEIGHT]],
        }

        def loss():
            return crf_loss(predict_marginals(x, params, T=cfg.T), y)

        report = {}
        rng = np.random.default_rng(seed)
        for name, tensors in groups.items():
            stats = {}
            report[name] = nx.finite_diff_check(loss, tensors, epsilon=cfg.gradcheck_epsilon,
                                                max_elements=cfg.gradcheck_elements, rng=rng,
                                                skip_kinks=True, stats=stats)
            report[f"{name}_checked"] = stats["checked"]
            report[f"{name}_skipped"] = stats["skipped"]
        with nx.GradientTape() as tape:
            value = loss()
        (gw,) = tape.gradient(value, [params[CRF_WEIGHT]])
        report["w_grad_max_abs"] = float(np.abs(gw).max())
    return report


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.out is not None:
        cfg.echo(args.out)
    seed = _seed(args, cfg)
    report = run_gradcheck(cfg, seed, identical=args.identical)
    failed = False
    for name in ("conv", "head", "w"):
        ok = report[name] <= GRADCHECK_TOLERANCE and report[f"{name}_checked"] > 0
        failed |= not ok
        print(f"{name:5s} max relative error {report[name]:.3e} {'ok' if ok else 'FAIL'}"
              f"  ({report[f'{name}_checked']} coordinates, {report[f'{name}_skipped']} at kinks)")
    print(f"w gradient max |g| {report['w_grad_max_abs']:.3e}")
    if args.out is not None:
        Path(args.out, "gradcheck.json").write_text(
            json.dumps({**report, "seed": seed, "config_hash": cfg.digest()}, indent=2, sort_keys=True) + "\n")
    return 1 if failed else 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed(s)")
    common.add_argument("--no-crf", action="store_true", help="baseline arm: per-patch softmax, no CRF weights")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", type=_parse_override, metavar="KEY=VALUE",
                        help="override one configuration field (value parsed as JSON when possible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ncrf", description="Patch-grid CRF tumor classifier on synthetic slides.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic slide dataset")

    p = sub.add_parser("train", parents=[common], help="train the NCRF (or --no-crf baseline) arm")
    p.add_argument("--data", type=Path, required=True, help="dataset directory with manifest.json")

    p = sub.add_parser("infer", parents=[common], help="probability maps for slides")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--slide", type=Path, action="append", help="slide PGM (repeatable)")
    p.add_argument("--data", type=Path, help="dataset directory; infers every slide of --split")
    p.add_argument("--split", nargs="+", default=["test"])

    p = sub.add_parser("detect", parents=[common], help="non-maximum suppression on probability maps")
    p.add_argument("--map", type=Path, nargs="+", required=True)

    p = sub.add_parser("froc", parents=[common], help="lesion-level FROC of detections against masks")
    p.add_argument("--detections", type=Path, nargs="+", required=True)
    p.add_argument("--mask", type=Path, nargs="+", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all parameter groups")
    p.add_argument("--identical", action="store_true", help="use one repeated patch so every cosine distance is 0")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "detect": cmd_detect,
    "froc": cmd_froc,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except (CliError, TrainingError, ValueError, OSError) as exc:
        print(f"ncrf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
