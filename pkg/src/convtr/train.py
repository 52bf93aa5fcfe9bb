"""Training loop: seeded crop sampling, focal loss, Adam with step decay,
per-epoch checkpoints, and exact resume."""

from __future__ import annotations

import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .config import (
    model_config_from_header,
    model_config_to_header,
    train_config_from_header,
    train_config_to_header,
)
from .data import ChannelStats, Scene, compute_channel_stats, crop_positions, has_valid_window, make_sample
from .errors import ConfigError, DataError, NumericFault
from .evaluation import ConfusionMatrix, evaluate_scenes, miou
from .losses import FocalLossConfig, focal_loss, focal_loss_backward
from .model import ModelConfig, ModelParams, build_model, model_backward, model_forward
from .optim import AdamState, TrainConfig, adam_init, adam_step, lr_at
from .rng import make_rng
from .tensor import Tensor


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    miou: float
    lr: float
    wall_ms: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} loss={self.loss:.6f} miou={self.miou:.4f} "
            f"lr={self.lr:.6g} wall_ms={self.wall_ms:.1f}"
        )


@dataclass
class TrainData:
    train_scenes: list
    val_scenes: list
    stats: ChannelStats
    alpha: np.ndarray


def split_scenes(scenes, val_fraction: float, seed: int):
    """Seeded scene-level split; validation may be empty for tiny corpora."""
    scenes = list(scenes)
    n_val = int(len(scenes) * val_fraction)
    order = make_rng(seed, "split").permutation(len(scenes))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def inverse_frequency_alpha(scenes, classes: int) -> np.ndarray:
    """Per-class weights proportional to inverse frequency, normalized to mean 1.
    Classes absent from the data keep weight 1 before normalization."""
    counts = np.zeros(classes, dtype=np.int64)
    for scene in scenes:
        counts += np.bincount(scene.labels.reshape(-1), minlength=classes)[:classes]
    total = counts.sum()
    alpha = np.where(counts > 0, total / (classes * np.maximum(counts, 1)), 1.0)
    return alpha / alpha.mean()


def prepare_training_data(scenes, train_cfg: TrainConfig, classes: int) -> TrainData:
    train, val = split_scenes(scenes, train_cfg.val_fraction, train_cfg.seed)
    if not train:
        raise DataError("no scenes left for training after the validation split")
    stats = compute_channel_stats(train)
    if train_cfg.alpha is not None:
        alpha = np.asarray(train_cfg.alpha, dtype=np.float64)
        if alpha.shape[0] != classes:
            raise ConfigError(f"alpha has {alpha.shape[0]} entries for {classes} classes")
    else:
        alpha = inverse_frequency_alpha(train, classes)
    return TrainData(train, val, stats, alpha)


# ---------------------------------------------------------------------------
# checkpoint assembly / restore


def make_checkpoint(
    params: ModelParams,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    adam: AdamState,
    epoch: int,
    best_metric: float,
    best_epoch: int,
    data: TrainData,
) -> Checkpoint:
    header = {}
    header.update(model_config_to_header(model_cfg))
    header.update(train_config_to_header(train_cfg))
    header["epoch"] = str(epoch)
    header["best_metric"] = repr(best_metric)
    header["best_epoch"] = str(best_epoch)
    header["adam.step"] = str(adam.step)

    buffers = {}
    for name, arr in params.state_dict().items():
        buffers[f"param.{name}"] = arr
    for name in params.named_parameters():
        buffers[f"adam.m.{name}"] = adam.m[name]
        buffers[f"adam.v.{name}"] = adam.v[name]
    buffers["meta.alpha"] = data.alpha
    buffers["meta.channel_mean"] = data.stats.mean
    buffers["meta.channel_std"] = data.stats.std
    return Checkpoint(header=header, buffers=buffers)


@dataclass
class RestoredState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: ModelParams
    adam: AdamState
    epoch: int
    best_metric: float
    best_epoch: int
    alpha: np.ndarray
    stats: ChannelStats


def restore_checkpoint(path) -> RestoredState:
    ckpt = checkpoint_load(path)
    model_cfg = model_config_from_header(ckpt.header)
    train_cfg = train_config_from_header(ckpt.header)
    params = build_model(model_cfg, train_cfg.seed)

    own = params.state_dict()
    state = {}
    for name, arr in own.items():
        key = f"param.{name}"
        if key not in ckpt.buffers:
            raise ConfigError(f"checkpoint missing buffer {key}")
        state[name] = ckpt.buffers[key].reshape(arr.shape)
    params.load_state(state)

    adam = adam_init(params.named_parameters())
    adam.step = ckpt.get_int("adam.step")
    for name, t in params.named_parameters().items():
        adam.m[name][...] = ckpt.buffers[f"adam.m.{name}"].reshape(t.data.shape)
        adam.v[name][...] = ckpt.buffers[f"adam.v.{name}"].reshape(t.data.shape)

    return RestoredState(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        params=params,
        adam=adam,
        epoch=ckpt.get_int("epoch"),
        best_metric=ckpt.get_float("best_metric"),
        best_epoch=ckpt.get_int("best_epoch"),
        alpha=ckpt.buffers["meta.alpha"].copy(),
        stats=ChannelStats(
            mean=ckpt.buffers["meta.channel_mean"].copy(),
            std=ckpt.buffers["meta.channel_std"].copy(),
        ),
    )


# ---------------------------------------------------------------------------
# the loop


def _assemble_batch(samples, dtype):
    x = np.stack([s.x.data for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.y for s in samples])
    return Tensor(x), y


def _persist_fault(out_dir: Path, epoch: int, batch_index: int, provenance) -> None:
    lines = [f"epoch={epoch}", f"batch_index={batch_index}"]
    lines += [f"sample={p[0]}:{p[1]}:{p[2]}" for p in provenance]
    (out_dir / "fault.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: TrainData,
    out_dir,
    resume_from=None,
    on_epoch=None,
) -> list:
    """Run the full recipe; returns one EpochRecord per epoch trained here."""
    model_cfg.validate()
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        restored = restore_checkpoint(resume_from)
        if model_config_to_header(restored.model_cfg) != model_config_to_header(model_cfg):
            raise ConfigError("checkpoint model configuration differs from the requested one")
        # total epochs is a stopping criterion, not part of the trajectory
        stored = train_config_to_header(restored.train_cfg)
        wanted = train_config_to_header(train_cfg)
        stored.pop("train.epochs")
        wanted.pop("train.epochs")
        if stored != wanted:
            raise ConfigError("checkpoint training configuration differs from the requested one")
        params, adam = restored.params, restored.adam
        start_epoch = restored.epoch + 1
        best_metric, best_epoch = restored.best_metric, restored.best_epoch
    else:
        params = build_model(model_cfg, train_cfg.seed)
        adam = adam_init(params.named_parameters())
        start_epoch = 0
        best_metric, best_epoch = float("-inf"), -1

    usable = [s for s in data.train_scenes if has_valid_window(s, model_cfg.patch)]
    if not usable:
        raise DataError(
            f"none of the {len(data.train_scenes)} training scenes admits a "
            f"{model_cfg.patch}x{model_cfg.patch} window with multiple classes"
        )

    focal_cfg = FocalLossConfig(data.alpha, train_cfg.gamma)
    dtype = model_cfg.dtype()
    named = params.named_parameters()
    log_path = out_dir / "train.log"
    records = []

    for epoch in range(start_epoch, train_cfg.epochs):
        t_epoch = time.perf_counter()
        lr = lr_at(epoch, train_cfg)
        epoch_rng = make_rng(train_cfg.seed, "epoch", epoch)
        streams = {
            i: crop_positions(s, model_cfg.patch, make_rng(train_cfg.seed, "crop", epoch, s.id))
            for i, s in enumerate(usable)
        }
        picks = epoch_rng.integers(0, len(usable), size=train_cfg.crops_per_epoch)
        samples = []
        for i in picks:
            row, col = next(streams[int(i)])
            samples.append(
                make_sample(usable[int(i)], row, col, model_cfg.patch, data.stats, dtype)
            )

        cm = ConfusionMatrix(model_cfg.classes)
        losses = []
        for batch_index, b0 in enumerate(range(0, len(samples), train_cfg.batch_size)):
            batch = samples[b0 : b0 + train_cfg.batch_size]
            x, y = _assemble_batch(batch, dtype)
            try:
                logits, tape = model_forward(x, params, model_cfg, training=True)
                loss, lcache = focal_loss(logits, y, focal_cfg)
                if not np.isfinite(loss.data):
                    raise NumericFault("focal loss is not finite")
            except NumericFault:
                _persist_fault(out_dir, epoch, batch_index, [s.provenance for s in batch])
                raise
            params.zero_grad()
            model_backward(tape, focal_loss_backward(lcache))
            adam_step(named, adam, lr)
            losses.append(float(loss.data))
            cm.add(y, logits.data.argmax(axis=1))

        train_miou = miou(cm)[1]
        if data.val_scenes:
            val_cm = evaluate_scenes(params, model_cfg, data.val_scenes, data.stats)
            select_metric = miou(val_cm)[1]
        else:
            select_metric = train_miou

        if select_metric > best_metric:
            best_metric, best_epoch = select_metric, epoch

        ckpt = make_checkpoint(
            params, model_cfg, train_cfg, adam, epoch, best_metric, best_epoch, data
        )
        epoch_path = out_dir / f"epoch_{epoch:04d}.ckpt"
        checkpoint_save(ckpt, epoch_path)
        if best_epoch == epoch:
            shutil.copyfile(epoch_path, out_dir / "best.ckpt")

        record = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            miou=train_miou,
            lr=lr,
            wall_ms=(time.perf_counter() - t_epoch) * 1e3,
        )
        records.append(record)
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(record.line() + "\n")
        if on_epoch is not None:
            on_epoch(record)

    return records
