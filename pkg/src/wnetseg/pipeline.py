"""Training runs and the per-image segmentation chain.

A segmentation runs: encoder on the image resized to the network input
size, CRF smoothing at that size, nearest-neighbour upsampling of the CRF
labels to the original size, connected-component regions, boundary cues on
the original image, and greedy merging into an ultrametric hierarchy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .affinity import build_affinity
from .config import PipelineConfig
from .contours.cues import local_cues
from .contours.regions import initial_regions
from .contours.ucm import UcmHierarchy, build_ucm, read_merges, threshold_ucm, write_merges
from .crf import crf_argmax, mean_field
from .metrics import EvalRecord, evaluate_hierarchy
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.network import NetworkParams, build, forward_encode
from .model.train import TrainState, train, write_trace
from .pnm import (
    load_bsds_seg,
    load_label_map,
    load_pnm,
    save_float_raster,
    save_label_map,
    save_pnm,
)
from .tensor import as_image, label_boundaries, make_rng, resize_bilinear, resize_nearest

IMAGE_SUFFIXES = (".pgm", ".ppm")
STAGES = ("encoder", "crf", "ucm")
CHECKPOINT = "checkpoint.bin"
TRACE = "trace.csv"
MANIFEST = "manifest.json"


class DataError(ValueError):
    pass


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"image directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no .pgm/.ppm images in {d}")
    return files


def fit_channels(img, channels: int) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == channels:
        return img
    if img.shape[2] == 1 and channels == 3:
        return np.repeat(img, 3, axis=2)
    if img.shape[2] == 3 and channels == 1:
        return img.mean(axis=2, keepdims=True)
    raise DataError(f"cannot feed a {img.shape[2]}-channel image to a {channels}-channel network")


def prepare(img, net_or_size, channels: int | None = None) -> np.ndarray:
    """Resize to the network input size and match its channel count."""
    if isinstance(net_or_size, NetworkParams):
        size, channels = net_or_size.config.input_size, net_or_size.config.in_channels
    else:
        size = net_or_size
    img = as_image(img)
    if channels is not None:
        img = fit_channels(img, channels)
    return resize_bilinear(img, size, size)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir, command: str, cfg: PipelineConfig, inputs) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.sha256(),
        "seed": cfg["seed"],
        "inputs": {str(Path(p).name): file_digest(p) for p in inputs},
    }
    Path(run_dir, MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_training(cfg: PipelineConfig, image_dir, run_dir, resume: bool = False,
                 stop_at: int | None = None, images=None) -> tuple[NetworkParams, TrainState]:
    """Train (or continue training) and leave checkpoint, trace and manifest in ``run_dir``."""
    files = list_images(image_dir) if images is None else []
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    tc = cfg.train()
    ckpt = run / CHECKPOINT
    if resume and ckpt.exists():
        net, _, state = load_checkpoint(ckpt)
        if state is None:
            raise DataError(f"{ckpt} holds no training state to resume from")
    else:
        net = build(cfg.wnet(), make_rng(cfg["seed"]))
        state = TrainState.fresh(tc)
        write_trace([], run / TRACE)
    if images is None:
        images = [prepare(load_pnm(p), net) for p in files]
    aff = cfg.affinity()
    every = cfg["train.checkpoint_every"]

    def checkpoint(st: TrainState) -> None:
        if st.iteration % every == 0:
            save_checkpoint(ckpt, net, tc, st)
            write_trace(st.trace, run / TRACE, append=True)
            st.trace.clear()

    state = train(net, images, tc, affinity=lambda img: build_affinity(img, aff),
                  state=state, stop_at=stop_at, on_iteration=checkpoint)
    save_checkpoint(ckpt, net, tc, state)
    write_trace(state.trace, run / TRACE, append=True)
    state.trace.clear()
    write_manifest(run, "train", cfg, files)
    return net, state


@dataclass
class Segmentation:
    soft: np.ndarray
    encoder: np.ndarray
    q: np.ndarray | None = None
    crf: np.ndarray | None = None
    regions: np.ndarray | None = None
    strength: np.ndarray | None = None
    hierarchy: UcmHierarchy | None = None

    def at(self, t: float) -> np.ndarray:
        return threshold_ucm(self.hierarchy, t)


def segment_image(net: NetworkParams, img, cfg: PipelineConfig, stage: str = "ucm") -> Segmentation:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    img = fit_channels(as_image(img), net.config.in_channels)
    h, w = img.shape[:2]
    x = prepare(img, net)
    p, _ = forward_encode(net, x, training=False)
    p = p.astype(np.float64)
    out = Segmentation(p, resize_nearest(crf_argmax(p), h, w))
    if stage == "encoder":
        return out
    out.q = mean_field(p, x, cfg.crf())
    out.crf = resize_nearest(crf_argmax(out.q), h, w)
    if stage == "crf":
        return out
    out.regions = initial_regions(out.crf, cfg["regions.min_area"])
    out.strength = local_cues(img, out.regions, cfg.cues())
    out.hierarchy = build_ucm(out.regions, out.strength)
    return out


def overlay(img, labels) -> np.ndarray:
    """The image with region boundary pixels painted red."""
    rgb = fit_channels(as_image(img), 3).copy()
    rgb[label_boundaries(labels)] = (1.0, 0.0, 0.0)
    return rgb


def write_segmentation(seg: Segmentation, img, image_id: str, out_dir, cfg: PipelineConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_label_map(seg.encoder, out / f"{image_id}.encoder.pgm")
    shown = seg.encoder
    if seg.crf is not None:
        save_float_raster(seg.q, out / f"{image_id}.q.wfr")
        save_label_map(seg.crf, out / f"{image_id}.crf.pgm")
        shown = seg.crf
    if seg.hierarchy is not None:
        save_label_map(seg.regions, out / f"{image_id}.regions.pgm")
        write_merges(seg.hierarchy, out / f"{image_id}.merges.txt")
        save_float_raster(seg.hierarchy.ucm, out / f"{image_id}.ucm.wfr")
        save_pnm(np.clip(seg.hierarchy.ucm, 0, 1), out / f"{image_id}.ucm.pgm")
        for t in cfg["segment.thresholds"]:
            save_label_map(seg.at(t), out / f"{image_id}.t{t:.2f}.pgm")
        shown = seg.at(cfg["segment.overlay_threshold"])
    save_pnm(overlay(img, shown), out / f"{image_id}.overlay.ppm")


def run_segment(cfg: PipelineConfig, checkpoint, inputs, out_dir, stage: str = "ucm") -> list[str]:
    net, _, _ = load_checkpoint(checkpoint)
    files = []
    for item in inputs:
        item = Path(item)
        files.extend(list_images(item) if item.is_dir() else [item])
    ids = []
    for path in files:
        if not path.exists():
            raise DataError(f"image {path} does not exist")
        img = load_pnm(path)
        seg = segment_image(net, img, cfg, stage)
        write_segmentation(seg, img, path.stem, out_dir, cfg)
        ids.append(path.stem)
    write_manifest(out_dir, "segment", cfg, [checkpoint, *files])
    return ids


def ground_truth_paths(gt_dir, image_id: str) -> list[Path]:
    """Annotation files of one image: ``<id>.pgm``, ``<id>.seg`` and every such file in ``<id>/``."""
    gt = Path(gt_dir)
    found = [p for p in (gt / f"{image_id}.pgm", gt / f"{image_id}.seg") if p.exists()]
    sub = gt / image_id
    if sub.is_dir():
        found += sorted(p for p in sub.iterdir() if p.suffix in (".pgm", ".seg"))
    return found


def load_ground_truth(gt_dir, image_id: str) -> list[np.ndarray]:
    return [load_bsds_seg(p) if p.suffix == ".seg" else load_label_map(p)
            for p in ground_truth_paths(gt_dir, image_id)]


def prediction_ids(pred_dir) -> list[str]:
    pred = Path(pred_dir)
    if not pred.is_dir():
        raise DataError(f"prediction directory {pred} does not exist")
    ids = {p.name[: -len(".merges.txt")] for p in pred.glob("*.merges.txt")}
    ids |= {p.stem for p in pred.glob("*.pgm") if "." not in p.stem}
    if not ids:
        raise DataError(f"no hierarchies or segmentations in {pred}")
    return sorted(ids)


def load_prediction(pred_dir, image_id: str):
    """A function from threshold to segmentation for one predicted image."""
    pred = Path(pred_dir)
    merges = pred / f"{image_id}.merges.txt"
    if merges.exists():
        regions = load_label_map(pred / f"{image_id}.regions.pgm")
        hier = UcmHierarchy(regions, read_merges(merges), np.zeros(regions.shape))
        return lambda t: threshold_ucm(hier, t)
    flat = load_label_map(pred / f"{image_id}.pgm")
    return lambda t: flat


def upsample_to(labels, shape) -> np.ndarray:
    if labels.shape == tuple(shape):
        return labels
    return resize_nearest(labels, *shape)


def run_eval(cfg: PipelineConfig, pred_dir, gt_dir) -> list[EvalRecord]:
    ids = prediction_ids(pred_dir)
    missing = [i for i in ids if not ground_truth_paths(gt_dir, i)]
    if missing:
        raise DataError("no ground truth for: " + ", ".join(missing))
    grid = cfg.eval_grid()
    records = []
    for image_id in ids:
        gts = load_ground_truth(gt_dir, image_id)
        seg_at = load_prediction(pred_dir, image_id)
        shape = gts[0].shape
        records.append(evaluate_hierarchy(image_id, lambda t: upsample_to(seg_at(t), shape),
                                          gts, grid))
    return records

