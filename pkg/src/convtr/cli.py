"""Command-line entry point: synth, train, eval, infer, bench, gradcheck.

Every command is driven by one flat config file plus ``--set key=value``
overrides, so reruns with the same inputs reproduce the same outputs.
Exit codes: 0 success, 1 usage/config, 2 data or format error, 3 numeric
fault, 4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .data import generate_synthetic_scene, load_scene_dir, scene_load, scene_save
from .errors import (
    ConfigError,
    ConvTrError,
    DataError,
    FormatError,
    NumericFault,
    ParameterError,
    PrecisionError,
    ShapeError,
    StatisticsError,
    UndefinedMetricError,
)
from .evaluation import (
    BENCH_HEADER,
    benchmark_inference,
    evaluate_scenes,
    miou,
    plan_tiles,
    segm_save,
    tiled_inference,
)
from .model import build_model
from .rng import seed_sequence
from .train import prepare_training_data, restore_checkpoint, train
from .verify import GRADCHECK_TOLERANCE, run_gradcheck_suite

OUTPUT_ENV_VAR = "CONVTR_OUTPUT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="convtr",
        description="Sea-ice segmentation with a hybrid convolutional transformer.",
        epilog=config_mod.help_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", metavar="PATH", help="config file (flat key=value)")
    parser.add_argument(
        "--set", metavar="K=V", action="append", default=[], dest="overrides",
        help="override one config key",
    )
    parser.add_argument("--seed", type=int, metavar="N", help="override the root seed")
    parser.add_argument("--out", metavar="DIR", help="override io.output")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate synthetic scene files")
    p.add_argument("--count", type=int, default=None, help="scenes to write (default data.count)")

    p = sub.add_parser("train", help="train the configured model")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    p = sub.add_parser("eval", help="mIoU of a checkpoint over scenes")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--scenes", metavar="PATH", help="scene file or directory (default data.dir)")

    p = sub.add_parser("infer", help="segment one scene into a class-map raster")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--scene", required=True, metavar="PATH")
    p.add_argument("--output", required=True, metavar="PATH")

    p = sub.add_parser("bench", help="inference latency comparison across variants")
    p.add_argument("--checkpoint", metavar="PATH", help="optional checkpoint to time")
    p.add_argument("--size", type=int, default=1100, help="square scene size (default 1100)")
    p.add_argument("--repeats", type=int, default=None, help="timed runs (default eval.repeats)")
    p.add_argument("--warmup", type=int, default=None, help="warmup runs (default eval.warmup)")
    p.add_argument(
        "--variants", default="convtr,autoencoder",
        help="comma list of variants to compare",
    )
    p.add_argument("--report", metavar="PATH", help="also write the table to a file")

    sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    return parser


def _load_run_config(args) -> RunConfig:
    if args.config is not None:
        values = config_mod.load_config_file(args.config)
    else:
        values = config_mod.default_values()
    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if env_out:
        values["io.output"] = env_out
    for assignment in args.overrides:
        config_mod.apply_override(values, assignment)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["io.output"] = args.out
    return RunConfig(values)


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(run: RunConfig, args) -> int:
    count = args.count if args.count is not None else run["data.count"]
    if count < 0:
        raise _UsageError(f"--count must be >= 0, got {count}")
    data_dir = Path(run["data.dir"])
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    for i in range(count):
        scene_seed = int(seed_sequence(run.seed, "synth", i).generate_state(1)[0])
        scene = generate_synthetic_scene(run.synth_config(scene_seed))
        scene_save(scene, data_dir / f"{scene.id}.scne")
        fr = scene.class_fractions()
        manifest_lines.append(
            f"{scene.id} sea={fr[0]:.4f} ice={fr[1]:.4f} land={fr[2]:.4f}"
        )
        print(manifest_lines[-1])
    (data_dir / "manifest.txt").write_text(
        "".join(line + "\n" for line in manifest_lines), encoding="utf-8"
    )
    print(f"wrote {count} scene(s) under {data_dir}")
    return EXIT_OK


def _latest_checkpoint(out_dir: Path):
    candidates = sorted(out_dir.glob("epoch_*.ckpt"))
    return candidates[-1] if candidates else None


def _cmd_train(run: RunConfig, args) -> int:
    model_cfg = run.model_config()
    train_cfg = run.train_config()
    data_dir = Path(run["data.dir"])
    scenes = load_scene_dir(data_dir) if data_dir.is_dir() else []
    if not scenes:
        raise DataError(f"no scene files found under {data_dir} (run `convtr synth` first)")
    data = prepare_training_data(scenes, train_cfg, model_cfg.classes)
    out_dir = run.output

    resume_from = None
    if args.resume:
        resume_from = _latest_checkpoint(out_dir)
        if resume_from is None:
            raise DataError(f"--resume set but no checkpoint found under {out_dir}")

    records = train(
        model_cfg, train_cfg, data, out_dir, resume_from=resume_from,
        on_epoch=lambda rec: print(rec.line()),
    )
    print(f"trained {len(records)} epoch(s); checkpoints under {out_dir}")
    return EXIT_OK


def _load_eval_scenes(path_text: str | None, run: RunConfig):
    path = Path(path_text) if path_text else Path(run["data.dir"])
    if path.is_dir():
        scenes = load_scene_dir(path)
        if not scenes:
            raise DataError(f"no scene files found under {path}")
        return scenes
    if path.is_file():
        return [scene_load(path)]
    raise DataError(f"scene path {path} does not exist")


def _cmd_eval(run: RunConfig, args) -> int:
    restored = restore_checkpoint(args.checkpoint)
    scenes = _load_eval_scenes(args.scenes, run)
    cm = evaluate_scenes(
        restored.params, restored.model_cfg, scenes, restored.stats,
        overlap=run["eval.overlap"], workers=run.workers,
    )
    per_class, mean_iou = miou(cm)
    print("confusion matrix (rows = truth, cols = prediction):")
    for row in cm.counts:
        print("  " + " ".join(f"{v:>12d}" for v in row))
    for c, iou in enumerate(per_class):
        text = "absent" if np.isnan(iou) else f"{iou:.4f}"
        print(f"class {c}: IoU {text}")
    print(f"mIoU: {mean_iou:.4f}")
    return EXIT_OK


def _cmd_infer(run: RunConfig, args) -> int:
    restored = restore_checkpoint(args.checkpoint)
    scene = scene_load(args.scene)
    cfg = restored.model_cfg
    h, w = scene.shape
    plan = plan_tiles(h, w, cfg.patch, run["eval.overlap"])
    t0 = time.perf_counter()
    class_map, _ = tiled_inference(
        restored.params, cfg, scene, plan, restored.stats, workers=run.workers
    )
    wall_ms = (time.perf_counter() - t0) * 1e3
    segm_save(class_map, scene.id, args.output)
    print(f"wrote {args.output} ({h}x{w}) in {wall_ms:.1f} ms")
    return EXIT_OK


def _cmd_bench(run: RunConfig, args) -> int:
    repeats = args.repeats if args.repeats is not None else run["eval.repeats"]
    warmup = args.warmup if args.warmup is not None else run["eval.warmup"]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise _UsageError("--variants must name at least one variant")

    restored = None
    if args.checkpoint:
        restored = restore_checkpoint(args.checkpoint)

    print(BENCH_HEADER)
    reports = []
    for variant in variants:
        cfg = run.model_config()
        cfg.variant = variant
        if variant == "transformer_only":
            cfg.patch = min(cfg.patch, 128)
        cfg.validate()
        if restored is not None and restored.model_cfg.variant == variant:
            params = restored.params
        else:
            if args.checkpoint:
                print(f"# {variant}: checkpoint is for another variant; using random init")
            params = build_model(cfg, run.seed)
        report = benchmark_inference(
            params, cfg, args.size, repeats, warmup,
            overlap=run["eval.overlap"], seed=run.seed,
        )
        reports.append(report)
        print(report.row())
    if args.report:
        lines = [BENCH_HEADER] + [r.row() for r in reports]
        Path(args.report).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_gradcheck(run: RunConfig, args) -> int:
    rows = run_gradcheck_suite(seeds=(run.seed,))
    width = max(len(r.component) for r in rows)
    failed = []
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        print(f"{row.component:<{width}}  {row.max_error:.3e}  {status}")
        if not row.passed:
            failed.append(row.component)
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)} (tolerance {GRADCHECK_TOLERANCE})")
        return EXIT_VERIFY
    print(f"all {len(rows)} components below {GRADCHECK_TOLERANCE}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        run = _load_run_config(args)
        return _COMMANDS[args.command](run, args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (ConfigError, ParameterError, PrecisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError,
        FormatError,
        ShapeError,
        StatisticsError,
        UndefinedMetricError,
        ConvTrError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
