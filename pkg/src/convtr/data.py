"""Synthetic dual-polarization scenes, crop sampling, and raster I/O.

Scenes are desk-scale stand-ins for real wide-swath SAR products: contiguous
sea/ice/land regions from thresholded smoothed random fields, class-
conditional backscatter levels in dB with a shared slowly-varying texture
field, and unit-mean gamma speckle. Class ids are fixed: 0 sea, 1 ice,
2 land.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    ConfigError,
    FormatError,
    IntegrityError,
    SceneSkipped,
    ShapeError,
    StatisticsError,
    UnsupportedVersionError,
)
from .fileio import Reader, digest64, format_text_header, parse_text_header, verify_checksum
from .rng import make_rng
from .tensor import Tensor

CLASS_NAMES = ("sea", "ice", "land")
NUM_CLASSES = 3
NORM_CLAMP = 10.0

SCENE_MAGIC = b"SCNE"
SCENE_VERSION = 1


@dataclass
class Scene:
    hh: np.ndarray  # [H,W] linear backscatter intensity
    hv: np.ndarray
    labels: np.ndarray  # [H,W] uint8 class ids
    id: str

    def __post_init__(self):
        if self.hh.shape != self.hv.shape or self.hh.shape != self.labels.shape:
            raise ShapeError(
                f"scene rasters disagree: hh {self.hh.shape}, hv {self.hv.shape}, "
                f"labels {self.labels.shape}"
            )
        bad = np.unique(self.labels[self.labels >= NUM_CLASSES])
        if bad.size:
            raise FormatError(f"unknown class id {int(bad[0])} in scene {self.id!r}")

    @property
    def shape(self) -> tuple:
        return self.hh.shape

    def class_fractions(self) -> np.ndarray:
        counts = np.bincount(self.labels.reshape(-1), minlength=NUM_CLASSES)
        return counts / self.labels.size


@dataclass
class SynthConfig:
    height: int = 1100
    width: int = 1100
    smoothness: float = 40.0  # gaussian sigma (pixels) of the region fields
    looks: float = 4.0  # equivalent number of looks for the speckle
    land_fraction: float = 0.15
    ice_fraction: float = 0.40
    hh_mean_db: tuple = (-22.0, -14.0, -8.0)  # sea, ice, land
    hv_mean_db: tuple = (-30.0, -20.0, -12.0)
    hh_std_db: tuple = (1.5, 1.5, 1.5)  # per-class sensitivity to the texture field
    hv_std_db: tuple = (1.5, 1.5, 1.5)
    seed: int = 0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError("scene size must be at least 16x16")
        if self.smoothness <= 0:
            raise ConfigError("smoothness must be positive")
        if self.looks < 1:
            raise ConfigError(f"looks must be >= 1, got {self.looks}")
        if not 0 < self.land_fraction < 1 or not 0 < self.ice_fraction < 1:
            raise ConfigError("class fractions must be in (0, 1)")
        if self.land_fraction + self.ice_fraction >= 1:
            raise ConfigError("land and ice fractions must leave room for sea")
        for name in ("hh_mean_db", "hv_mean_db", "hh_std_db", "hv_std_db"):
            if len(getattr(self, name)) != NUM_CLASSES:
                raise ConfigError(f"{name} needs {NUM_CLASSES} entries")
        if any(s <= 0 for s in self.hh_std_db) or any(s <= 0 for s in self.hv_std_db):
            raise ConfigError("texture std values must be positive")


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    f -= f.mean()
    std = f.std()
    if std > 0:
        f /= std
    return f


def generate_synthetic_scene(cfg: SynthConfig) -> Scene:
    """Deterministic synthetic scene; content is a pure function of the config."""
    cfg.validate()
    rng = make_rng(cfg.seed, "scene")
    shape = (cfg.height, cfg.width)

    # the brightness texture varies on a much larger scale than the class
    # regions, so absolute intensity is only meaningful relative to context
    f_ice = _smooth_field(rng, shape, cfg.smoothness)
    f_land = _smooth_field(rng, shape, cfg.smoothness)
    f_tex = _smooth_field(rng, shape, cfg.smoothness * 3.0)

    land = f_land >= np.quantile(f_land, 1.0 - cfg.land_fraction)
    sea_ice = ~land
    ice_q = 1.0 - cfg.ice_fraction / max(1e-9, sea_ice.mean())
    ice = sea_ice & (f_ice >= np.quantile(f_ice[sea_ice], np.clip(ice_q, 0.0, 1.0)))

    labels = np.zeros(shape, dtype=np.uint8)
    labels[ice] = 1
    labels[land] = 2

    def channel(mean_db, std_db):
        db = np.asarray(mean_db)[labels] + np.asarray(std_db)[labels] * f_tex
        speckle = rng.gamma(cfg.looks, 1.0 / cfg.looks, size=shape)
        return 10.0 ** (db / 10.0) * speckle

    hh = channel(cfg.hh_mean_db, cfg.hh_std_db)
    hv = channel(cfg.hv_mean_db, cfg.hv_std_db)
    return Scene(hh=hh, hv=hv, labels=labels, id=f"synth-{cfg.seed:08x}")


# ---------------------------------------------------------------------------
# crop sampling


@dataclass
class Sample:
    x: Tensor  # [2,P,P] normalized
    y: np.ndarray  # [P,P] class ids
    provenance: tuple  # (scene id, row, col)


def _valid_window_mask(labels: np.ndarray, p: int) -> np.ndarray:
    """Boolean mask over all (row, col) origins whose PxP window holds >= 2
    classes, computed from per-class integral images."""
    h, w = labels.shape
    present = np.zeros((h - p + 1, w - p + 1), dtype=np.int32)
    for c in range(NUM_CLASSES):
        ii = np.zeros((h + 1, w + 1), dtype=np.int64)
        np.cumsum(np.cumsum(labels == c, axis=0), axis=1, out=ii[1:, 1:])
        window = ii[p:, p:] - ii[:-p, p:] - ii[p:, :-p] + ii[:-p, :-p]
        present += window > 0
    return present >= 2


def has_valid_window(scene: Scene, p: int) -> bool:
    h, w = scene.shape
    if h < p or w < p:
        return False
    return bool(_valid_window_mask(scene.labels, p).any())


_REJECTION_CAP = 1000


def crop_positions(scene: Scene, p: int, rng):
    """Yield (row, col) origins of PxP windows containing >= 2 classes,
    uniformly over the valid positions, forever.

    Rejection-samples up to a cap, then falls back to an exhaustive scan;
    raises SceneSkipped if no window can satisfy the constraint.
    """
    h, w = scene.shape
    if h < p or w < p:
        raise ShapeError(f"scene {scene.id!r} ({h}x{w}) smaller than crop {p}")
    labels = scene.labels
    rejected = 0
    valid = None
    while True:
        if valid is None:
            row = int(rng.integers(0, h - p + 1))
            col = int(rng.integers(0, w - p + 1))
            window = labels[row : row + p, col : col + p]
            if (window != window[0, 0]).any():
                rejected = 0
                yield row, col
                continue
            rejected += 1
            if rejected < _REJECTION_CAP:
                continue
            positions = np.argwhere(_valid_window_mask(labels, p))
            if positions.size == 0:
                raise SceneSkipped(
                    f"scene {scene.id!r} has no {p}x{p} window with multiple classes"
                )
            valid = positions
        pick = valid[int(rng.integers(0, len(valid)))]
        yield int(pick[0]), int(pick[1])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class ChannelStats:
    mean: np.ndarray  # [2] (hh, hv)
    std: np.ndarray  # [2]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise StatisticsError("channel std must be positive")


def compute_channel_stats(scenes) -> ChannelStats:
    """One-pass per-channel mean/std over all pixels of the given scenes,
    merged scene by scene with the parallel-variance formula."""
    scenes = list(scenes)
    if not scenes:
        raise StatisticsError("need at least one scene for channel statistics")
    n = np.zeros(2)
    mean = np.zeros(2)
    m2 = np.zeros(2)
    for scene in scenes:
        for ch, raster in enumerate((scene.hh, scene.hv)):
            cnt = raster.size
            mu = raster.mean()
            var = raster.var()
            delta = mu - mean[ch]
            total = n[ch] + cnt
            mean[ch] += delta * cnt / total
            m2[ch] += var * cnt + delta * delta * n[ch] * cnt / total
            n[ch] = total
    std = np.sqrt(m2 / n)
    if np.any(std == 0):
        which = "hh" if std[0] == 0 else "hv"
        raise StatisticsError(f"channel {which} is constant over the training scenes")
    return ChannelStats(mean=mean, std=std)


def normalize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel z-score of a [2,...] raster stack, clamped to +-10 sigma."""
    z = (x - stats.mean[:, None, None]) / stats.std[:, None, None]
    return np.clip(z, -NORM_CLAMP, NORM_CLAMP)


def extract_crop(scene: Scene, row: int, col: int, p: int) -> np.ndarray:
    return np.stack(
        [scene.hh[row : row + p, col : col + p], scene.hv[row : row + p, col : col + p]]
    )


def make_sample(scene: Scene, row: int, col: int, p: int, stats: ChannelStats,
                dtype=np.float32) -> Sample:
    x = normalize(extract_crop(scene, row, col, p), stats).astype(dtype)
    y = scene.labels[row : row + p, col : col + p].astype(np.int64)
    return Sample(Tensor(x), y, (scene.id, row, col))


# ---------------------------------------------------------------------------
# scene files


def scene_save(scene: Scene, path) -> None:
    header = format_text_header(
        {
            "id": scene.id,
            "height": str(scene.shape[0]),
            "width": str(scene.shape[1]),
            "precision": "float64",
        }
    )
    parts = [
        SCENE_MAGIC,
        struct.pack("<I", SCENE_VERSION),
        struct.pack("<Q", len(header)),
        header,
        np.ascontiguousarray(scene.hh, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.hv, dtype="<f8").tobytes(),
        np.ascontiguousarray(scene.labels, dtype="u1").tobytes(),
    ]
    body = b"".join(parts)
    Path(path).write_bytes(body + digest64(body))


def scene_load(path) -> Scene:
    name = str(path)
    body = verify_checksum(Path(path).read_bytes(), name)
    r = Reader(body, name)
    if r.take(4) != SCENE_MAGIC:
        raise FormatError(f"{name}: bad magic, not a scene file")
    version = r.u32()
    if version != SCENE_VERSION:
        raise UnsupportedVersionError(f"{name}: scene format version {version}")
    header = parse_text_header(r.take(r.u64()), name)
    try:
        h = int(header["height"])
        w = int(header["width"])
        scene_id = header["id"]
    except KeyError as exc:
        raise FormatError(f"{name}: header missing {exc}") from None
    if header.get("precision") != "float64":
        raise FormatError(f"{name}: unsupported precision {header.get('precision')!r}")
    if h < 1 or w < 1:
        raise FormatError(f"{name}: invalid raster size {h}x{w}")
    count = h * w
    hh = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(h, w).copy()
    hv = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(h, w).copy()
    labels = np.frombuffer(r.take(count), dtype="u1").reshape(h, w).copy()
    r.expect_consumed()
    return Scene(hh=hh, hv=hv, labels=labels, id=scene_id)


def load_scene_dir(directory) -> list:
    """All *.scne files under a directory, sorted by filename."""
    paths = sorted(Path(directory).glob("*.scne"))
    return [scene_load(p) for p in paths]
