"""Run configuration: one flat key=value file drives every command.

Keys are namespaced by section (model., train., data., eval., io.) and each
has a typed default; unknown keys are rejected. ``--set section.key=value``
overrides individual entries from the command line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .optim import TrainConfig


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_str(text: str) -> str:
    return text


def _parse_int_or_auto(text: str):
    if text.strip().lower() == "auto":
        return None
    return _parse_int(text)


def _parse_floats_or_auto(text: str):
    if text.strip().lower() == "auto":
        return None
    return tuple(_parse_float(t) for t in text.split(","))


def _parse_int_tuple(text: str) -> tuple:
    return tuple(_parse_int(t) for t in text.split(","))


def _parse_float_tuple(text: str) -> tuple:
    return tuple(_parse_float(t) for t in text.split(","))


def _parse_choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text

    return parse


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class _Key:
    name: str
    parse: object
    default: object
    help: str


_KEYS = [
    _Key("seed", _parse_int, 0, "root seed; every random stream derives from it"),
    _Key("workers", _parse_int, 1, "max concurrent tile workers for inference"),
    _Key("io.output", _parse_str, "runs", "directory for checkpoints, logs and reports"),
    _Key("model.variant", _parse_choice(("convtr", "autoencoder", "transformer_only")),
         "convtr", "network variant"),
    _Key("model.patch", _parse_int, 512, "training crop size P in pixels"),
    _Key("model.classes", _parse_int, 3, "number of segmentation classes C"),
    _Key("model.depth", _parse_int, 5, "transformer core depth L"),
    _Key("model.heads", _parse_int, 5, "attention heads per core block"),
    _Key("model.d_head", _parse_int_or_auto, 24,
         "per-head width (auto = d_model // heads)"),
    _Key("model.widths", _parse_int_tuple, (32, 32, 64, 128),
         "channel progression of the downsampling block"),
    _Key("model.precision", _parse_choice(("single", "double")), "single",
         "floating-point precision of parameters and activations"),
    _Key("train.lr", _parse_float, 1e-4, "initial learning rate"),
    _Key("train.lr_decay", _parse_float, 0.5, "learning-rate decay factor"),
    _Key("train.lr_decay_every", _parse_int, 10, "epochs between decay steps"),
    _Key("train.epochs", _parse_int, 50, "training epochs"),
    _Key("train.batch_size", _parse_int, 16, "samples per mini-batch"),
    _Key("train.gamma", _parse_float, 2.0, "focal-loss down-weighting exponent"),
    _Key("train.alpha", _parse_floats_or_auto, None,
         "per-class focal weights: auto (inverse class frequency) or a comma list"),
    _Key("train.crops_per_epoch", _parse_int, 128, "random crops drawn per epoch"),
    _Key("train.val_fraction", _parse_float, 0.1,
         "fraction of training scenes held out for best-checkpoint selection"),
    _Key("data.dir", _parse_str, "scenes", "directory holding .scne scene files"),
    _Key("data.count", _parse_int, 8, "scenes generated by the synth command"),
    _Key("data.height", _parse_int, 1100, "synthetic scene height in pixels"),
    _Key("data.width", _parse_int, 1100, "synthetic scene width in pixels"),
    _Key("data.smoothness", _parse_float, 40.0,
         "spatial scale (pixels) of the synthetic class regions"),
    _Key("data.looks", _parse_float, 4.0, "speckle looks (higher = less noise)"),
    _Key("data.land_fraction", _parse_float, 0.15, "target land fraction"),
    _Key("data.ice_fraction", _parse_float, 0.40, "target ice fraction"),
    _Key("data.hh_mean_db", _parse_float_tuple, (-22.0, -14.0, -8.0),
         "per-class HH backscatter means in dB (sea, ice, land)"),
    _Key("data.hv_mean_db", _parse_float_tuple, (-30.0, -20.0, -12.0),
         "per-class HV backscatter means in dB"),
    _Key("data.hh_std_db", _parse_float_tuple, (1.5, 1.5, 1.5),
         "per-class HH texture spread in dB"),
    _Key("data.hv_std_db", _parse_float_tuple, (1.5, 1.5, 1.5),
         "per-class HV texture spread in dB"),
    _Key("eval.overlap", _parse_int, 64, "tile overlap in pixels for full-scene inference"),
    _Key("eval.repeats", _parse_int, 5, "timed repetitions for the benchmark"),
    _Key("eval.warmup", _parse_int, 2, "untimed warmup runs for the benchmark"),
]

_REGISTRY = {k.name: k for k in _KEYS}


def default_values() -> dict:
    return {k.name: k.default for k in _KEYS}


def parse_value(name: str, text: str):
    key = _REGISTRY.get(name)
    if key is None:
        raise ConfigError(f"unknown config key {name!r}")
    return key.parse(text.strip())


def load_config_file(path) -> dict:
    values = default_values()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        name, text_value = (part.strip() for part in stripped.split("=", 1))
        values[name] = parse_value(name, text_value)
    return values


def apply_override(values: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    name, text_value = (part.strip() for part in assignment.split("=", 1))
    values[name] = parse_value(name, text_value)


def help_table() -> str:
    width = max(len(k.name) for k in _KEYS)
    lines = ["configuration keys (defaults in brackets):"]
    for k in _KEYS:
        lines.append(f"  {k.name:<{width}}  [{format_value(k.default)}]  {k.help}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, name: str):
        return self.values[name]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def output(self) -> Path:
        return Path(self.values["io.output"])

    @property
    def workers(self) -> int:
        return self.values["workers"]

    def model_config(self) -> ModelConfig:
        v = self.values
        cfg = ModelConfig(
            patch=v["model.patch"],
            classes=v["model.classes"],
            depth=v["model.depth"],
            heads=v["model.heads"],
            d_head=v["model.d_head"],
            widths=tuple(v["model.widths"]),
            variant=v["model.variant"],
            precision=v["model.precision"],
        )
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        v = self.values
        cfg = TrainConfig(
            lr=v["train.lr"],
            lr_decay=v["train.lr_decay"],
            lr_decay_every=v["train.lr_decay_every"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            seed=v["seed"],
            gamma=v["train.gamma"],
            alpha=v["train.alpha"],
            crops_per_epoch=v["train.crops_per_epoch"],
            val_fraction=v["train.val_fraction"],
        )
        cfg.validate()
        return cfg

    def synth_config(self, scene_seed: int) -> SynthConfig:
        v = self.values
        cfg = SynthConfig(
            height=v["data.height"],
            width=v["data.width"],
            smoothness=v["data.smoothness"],
            looks=v["data.looks"],
            land_fraction=v["data.land_fraction"],
            ice_fraction=v["data.ice_fraction"],
            hh_mean_db=tuple(v["data.hh_mean_db"]),
            hv_mean_db=tuple(v["data.hv_mean_db"]),
            hh_std_db=tuple(v["data.hh_std_db"]),
            hv_std_db=tuple(v["data.hv_std_db"]),
            seed=scene_seed,
        )
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# checkpoint header (de)serialization for the two persisted configs


def model_config_to_header(cfg: ModelConfig) -> dict:
    return {
        "model.variant": cfg.variant,
        "model.patch": str(cfg.patch),
        "model.classes": str(cfg.classes),
        "model.depth": str(cfg.depth),
        "model.heads": str(cfg.heads),
        "model.d_head": format_value(cfg.d_head),
        "model.widths": ",".join(str(w) for w in cfg.widths),
        "model.precision": cfg.precision,
    }


def model_config_from_header(header: dict) -> ModelConfig:
    cfg = ModelConfig(
        patch=int(header["model.patch"]),
        classes=int(header["model.classes"]),
        depth=int(header["model.depth"]),
        heads=int(header["model.heads"]),
        d_head=_parse_int_or_auto(header["model.d_head"]),
        widths=_parse_int_tuple(header["model.widths"]),
        variant=header["model.variant"],
        precision=header["model.precision"],
    )
    cfg.validate()
    return cfg


def train_config_to_header(cfg: TrainConfig) -> dict:
    return {
        "train.lr": repr(cfg.lr),
        "train.lr_decay": repr(cfg.lr_decay),
        "train.lr_decay_every": str(cfg.lr_decay_every),
        "train.epochs": str(cfg.epochs),
        "train.batch_size": str(cfg.batch_size),
        "train.seed": str(cfg.seed),
        "train.gamma": repr(cfg.gamma),
        "train.alpha": format_value(cfg.alpha),
        "train.crops_per_epoch": str(cfg.crops_per_epoch),
        "train.val_fraction": repr(cfg.val_fraction),
    }


def train_config_from_header(header: dict) -> TrainConfig:
    cfg = TrainConfig(
        lr=float(header["train.lr"]),
        lr_decay=float(header["train.lr_decay"]),
        lr_decay_every=int(header["train.lr_decay_every"]),
        epochs=int(header["train.epochs"]),
        batch_size=int(header["train.batch_size"]),
        seed=int(header["train.seed"]),
        gamma=float(header["train.gamma"]),
        alpha=_parse_floats_or_auto(header["train.alpha"]),
        crops_per_epoch=int(header["train.crops_per_epoch"]),
        val_fraction=float(header["train.val_fraction"]),
    )
    cfg.validate()
    return cfg
