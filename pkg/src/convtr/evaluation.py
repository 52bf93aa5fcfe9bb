"""Segmentation metrics, tiled full-scene inference, and latency benchmarks."""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ChannelStats, Scene, SynthConfig, generate_synthetic_scene, normalize
from .errors import (
    DataError,
    FormatError,
    IntegrityError,
    ParameterError,
    UndefinedMetricError,
    UnsupportedVersionError,
)
from .fileio import Reader, digest64, format_text_header, parse_text_header, verify_checksum
from .model import ModelConfig, ModelParams, model_predict
from .rng import seed_sequence
from .tensor import Tensor


class ConfusionMatrix:
    """C x C counts: counts[i, j] = pixels of true class i predicted as j."""

    def __init__(self, classes: int):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def add(self, truth: np.ndarray, pred: np.ndarray) -> None:
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise DataError(f"truth has {truth.size} pixels, prediction {pred.size}")
        c = self.classes
        for name, arr in (("truth", truth), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"{name} contains a class outside [0, {c})")
        flat = np.bincount(truth * c + pred, minlength=c * c)
        self.counts += flat.reshape(c, c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_accumulate(pred: np.ndarray, truth: np.ndarray, cm: ConfusionMatrix):
    cm.add(truth, pred)
    return cm


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    included = denom > 0
    if not included.any():
        raise UndefinedMetricError("every class is absent; mIoU undefined")
    per_class = np.full(cm.classes, np.nan)
    per_class[included] = tp[included] / denom[included]
    return per_class, float(per_class[included].mean())


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Tile:
    row: int
    col: int
    kept: tuple  # (r0, r1, c0, c1) in scene coordinates


@dataclass
class TilingPlan:
    tile: int
    overlap: int
    height: int
    width: int
    tiles: list


def _axis_plan(n: int, p: int, overlap: int):
    """Tile origins and disjoint kept intervals along one axis."""
    if n <= p:
        return [0], [(0, n)]
    stride = p - overlap
    origins = list(range(0, n - p + 1, stride))
    if origins[-1] != n - p:
        origins.append(n - p)
    kept = []
    prev = 0
    for i, o in enumerate(origins):
        if i + 1 < len(origins):
            cut = (origins[i + 1] + o + p) // 2
        else:
            cut = n
        kept.append((prev, cut))
        prev = cut
    return origins, kept


def plan_tiles(height: int, width: int, p: int, overlap: int) -> TilingPlan:
    """Cover a scene with PxP tiles whose kept center regions partition it."""
    if overlap < 0 or overlap % 2:
        raise ParameterError(f"overlap must be even and >= 0, got {overlap}")
    if overlap >= p:
        raise ParameterError(f"overlap {overlap} must be smaller than tile {p}")
    rows, row_kept = _axis_plan(height, p, overlap)
    cols, col_kept = _axis_plan(width, p, overlap)
    tiles = [
        Tile(r, c, (rk[0], rk[1], ck[0], ck[1]))
        for r, rk in zip(rows, row_kept)
        for c, ck in zip(cols, col_kept)
    ]
    return TilingPlan(tile=p, overlap=overlap, height=height, width=width, tiles=tiles)


def _padded_crop(raster: np.ndarray, row: int, col: int, p: int) -> np.ndarray:
    h, w = raster.shape
    crop = raster[row : min(row + p, h), col : min(col + p, w)]
    pad_h = p - crop.shape[0]
    pad_w = p - crop.shape[1]
    if pad_h or pad_w:
        crop = np.pad(crop, ((0, pad_h), (0, pad_w)), mode="reflect")
    return crop


def tiled_inference(
    params: ModelParams,
    cfg: ModelConfig,
    scene: Scene,
    plan: TilingPlan,
    stats: ChannelStats,
    workers: int = 1,
):
    """Predict a full scene tile by tile; every output pixel written once.

    Returns (class_map [H,W] uint8, probabilities [C,H,W] float32).
    """
    h, w = scene.shape
    if (plan.height, plan.width) != (h, w):
        raise ParameterError(f"plan covers {plan.height}x{plan.width}, scene is {h}x{w}")
    p = plan.tile
    class_map = np.empty((h, w), dtype=np.uint8)
    probs = np.empty((cfg.classes, h, w), dtype=np.float32)

    def run_tile(tile: Tile):
        raw = np.stack(
            [
                _padded_crop(scene.hh, tile.row, tile.col, p),
                _padded_crop(scene.hv, tile.row, tile.col, p),
            ]
        )
        x = Tensor(normalize(raw, stats).astype(cfg.dtype())[None])
        tile_probs, tile_map = model_predict(x, params, cfg)
        r0, r1, c0, c1 = tile.kept
        lr, lc = r0 - tile.row, c0 - tile.col
        class_map[r0:r1, c0:c1] = tile_map[0, lr : lr + r1 - r0, lc : lc + c1 - c0]
        probs[:, r0:r1, c0:c1] = tile_probs.data[0, :, lr : lr + r1 - r0, lc : lc + c1 - c0]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, plan.tiles))
    else:
        for tile in plan.tiles:
            run_tile(tile)
    return class_map, probs


def evaluate_scenes(params, cfg, scenes, stats, overlap: int = 0, workers: int = 1):
    """Confusion matrix over full scenes via tiled inference."""
    cm = ConfusionMatrix(cfg.classes)
    for scene in scenes:
        h, w = scene.shape
        plan = plan_tiles(h, w, cfg.patch, overlap)
        class_map, _ = tiled_inference(params, cfg, scene, plan, stats, workers)
        cm.add(scene.labels.astype(np.int64), class_map.astype(np.int64))
    return cm


# ---------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchReport:
    variant: str
    size: int
    repeats: int
    warmup: int
    times_ms: list = field(default_factory=list)

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    def row(self) -> str:
        return (
            f"{self.variant:<18} {self.size:>6} {self.repeats:>7} "
            f"{self.median_ms:>11.1f} {self.mean_ms:>10.1f} {self.p95_ms:>10.1f}"
        )


BENCH_HEADER = (
    f"{'variant':<18} {'size':>6} {'repeats':>7} {'median_ms':>11} {'mean_ms':>10} {'p95_ms':>10}"
)


def benchmark_inference(
    params: ModelParams,
    cfg: ModelConfig,
    size: int,
    repeats: int,
    warmup: int,
    overlap: int = 64,
    seed: int = 0,
) -> BenchReport:
    """Wall-clock tiled inference on a synthetic scene of the given size."""
    if repeats < 3:
        raise ParameterError(f"repeats must be >= 3, got {repeats}")
    if warmup < 1:
        raise ParameterError(f"warmup must be >= 1, got {warmup}")
    scene_seed = int(seed_sequence(seed, "bench", size).generate_state(1)[0])
    scene = generate_synthetic_scene(SynthConfig(height=size, width=size, seed=scene_seed))
    stats = ChannelStats(
        mean=np.array([scene.hh.mean(), scene.hv.mean()]),
        std=np.array([scene.hh.std(), scene.hv.std()]),
    )
    tile = min(cfg.patch, size)
    plan = plan_tiles(size, size, tile, overlap if overlap < tile else 0)

    report = BenchReport(variant=cfg.variant, size=size, repeats=repeats, warmup=warmup)
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        tiled_inference(params, cfg, scene, plan, stats, workers=1)
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            report.times_ms.append(elapsed_ms)
    return report


# ---------------------------------------------------------------------------
# class-map raster files


SEGM_MAGIC = b"SEGM"
SEGM_VERSION = 1


def segm_save(class_map: np.ndarray, scene_id: str, path) -> None:
    class_map = np.asarray(class_map, dtype=np.uint8)
    header = format_text_header(
        {
            "id": scene_id,
            "height": str(class_map.shape[0]),
            "width": str(class_map.shape[1]),
        }
    )
    body = b"".join(
        [
            SEGM_MAGIC,
            struct.pack("<I", SEGM_VERSION),
            struct.pack("<Q", len(header)),
            header,
            np.ascontiguousarray(class_map).tobytes(),
        ]
    )
    Path(path).write_bytes(body + digest64(body))


def segm_load(path):
    name = str(path)
    body = verify_checksum(Path(path).read_bytes(), name)
    r = Reader(body, name)
    if r.take(4) != SEGM_MAGIC:
        raise FormatError(f"{name}: bad magic, not a class-map file")
    version = r.u32()
    if version != SEGM_VERSION:
        raise UnsupportedVersionError(f"{name}: class-map format version {version}")
    header = parse_text_header(r.take(r.u64()), name)
    h, w = int(header["height"]), int(header["width"])
    class_map = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w).copy()
    r.expect_consumed()
    return class_map, header["id"]
