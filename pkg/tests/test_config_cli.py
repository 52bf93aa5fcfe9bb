import numpy as np
import pytest

from convtr import cli, config
from convtr.errors import ConfigError


class TestConfigRegistry:
    def test_defaults_reproduce_training_recipe(self):
        run = config.RunConfig(config.default_values())
        tcfg = run.train_config()
        assert tcfg.lr == 1e-4
        assert tcfg.lr_decay == 0.5
        assert tcfg.lr_decay_every == 10
        assert tcfg.epochs == 50
        assert tcfg.batch_size == 16
        mcfg = run.model_config()
        assert mcfg.depth == 5
        assert mcfg.heads == 5
        assert mcfg.patch == 512
        assert mcfg.classes == 3
        assert mcfg.variant == "convtr"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_value("nope.key", "1")

    def test_file_parsing_with_comments(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# comment line\n"
            "model.patch = 64   # trailing comment\n"
            "\n"
            "train.lr=0.001\n"
            "data.hh_mean_db = -20,-12,-6\n"
        )
        values = config.load_config_file(path)
        assert values["model.patch"] == 64
        assert values["train.lr"] == 0.001
        assert values["data.hh_mean_db"] == (-20.0, -12.0, -6.0)
        # untouched keys keep defaults
        assert values["train.batch_size"] == 16

    def test_bad_value_types_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("model.patch = lots\n")
        with pytest.raises(ConfigError):
            config.load_config_file(path)

    def test_override_assignment(self):
        values = config.default_values()
        config.apply_override(values, "model.depth=2")
        assert values["model.depth"] == 2
        with pytest.raises(ConfigError):
            config.apply_override(values, "model.depth")

    def test_auto_values(self):
        values = config.default_values()
        config.apply_override(values, "model.d_head=auto")
        assert values["model.d_head"] is None
        config.apply_override(values, "train.alpha=1,1,2")
        assert values["train.alpha"] == (1.0, 1.0, 2.0)

    def test_help_table_covers_every_key(self):
        table = config.help_table()
        for key in config.default_values():
            assert key in table

    def test_config_header_round_trip(self):
        run = config.RunConfig(config.default_values())
        mcfg = run.model_config()
        tcfg = run.train_config()
        assert config.model_config_from_header(config.model_config_to_header(mcfg)) == mcfg
        assert config.train_config_from_header(config.train_config_to_header(tcfg)) == tcfg


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(
        "seed = 3\n"
        "io.output = out\n"
        "model.patch = 32\n"
        "model.depth = 1\n"
        "model.heads = 2\n"
        "model.d_head = auto\n"
        "train.epochs = 1\n"
        "train.batch_size = 4\n"
        "train.crops_per_epoch = 4\n"
        "train.val_fraction = 0.0\n"
        "data.dir = scenes\n"
        "data.count = 2\n"
        "data.height = 96\n"
        "data.width = 96\n"
        "data.smoothness = 10.0\n"
        "eval.overlap = 8\n"
    )
    return tmp_path


def run_cli(*args):
    return cli.main(list(args))


class TestCli:
    def test_help_exits_zero_and_lists_config_keys(self, capsys):
        assert run_cli("--help") == 0
        out = capsys.readouterr().out
        for key in ("model.patch", "train.lr", "data.looks", "eval.overlap"):
            assert key in out
        for command in ("synth", "train", "eval", "infer", "bench", "gradcheck"):
            assert command in out

    def test_no_command_is_usage_error(self):
        assert run_cli() == 1

    def test_unknown_config_key_is_usage_error(self, workdir):
        assert run_cli("--config", "toy.cfg", "--set", "bogus=1", "synth") == 1

    def test_train_without_scenes_is_data_error(self, workdir):
        assert run_cli("--config", "toy.cfg", "train") == 2

    def test_synth_writes_scenes_and_manifest(self, workdir, capsys):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        scenes = sorted((workdir / "scenes").glob("*.scne"))
        assert len(scenes) == 2
        manifest = (workdir / "scenes" / "manifest.txt").read_text().strip().splitlines()
        assert len(manifest) == 2
        assert all("sea=" in line and "ice=" in line and "land=" in line
                   for line in manifest)

    def test_synth_is_reproducible(self, workdir):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        first = {p.name: p.read_bytes() for p in (workdir / "scenes").glob("*.scne")}
        assert run_cli("--config", "toy.cfg", "synth") == 0
        second = {p.name: p.read_bytes() for p in (workdir / "scenes").glob("*.scne")}
        assert first == second

    def test_synth_count_zero(self, workdir):
        assert run_cli("--config", "toy.cfg", "synth", "--count", "0") == 0
        assert (workdir / "scenes" / "manifest.txt").read_text() == ""

    def test_full_flow_train_eval_infer_bench(self, workdir, capsys):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        assert run_cli("--config", "toy.cfg", "train") == 0
        assert (workdir / "out" / "best.ckpt").exists()
        capsys.readouterr()

        assert run_cli("--config", "toy.cfg", "eval", "--checkpoint", "out/best.ckpt") == 0
        eval_out = capsys.readouterr().out
        assert "mIoU: 0." in eval_out
        import re

        assert re.search(r"mIoU: \d\.\d{4}\n", eval_out)

        scene_file = sorted((workdir / "scenes").glob("*.scne"))[0]
        assert run_cli(
            "--config", "toy.cfg", "infer", "--checkpoint", "out/best.ckpt",
            "--scene", str(scene_file), "--output", "out/map.segm",
        ) == 0
        from convtr.evaluation import segm_load

        class_map, _ = segm_load(workdir / "out" / "map.segm")
        assert class_map.shape == (96, 96)
        assert set(np.unique(class_map)) <= {0, 1, 2}

        # rerun produces an identical raster
        first = (workdir / "out" / "map.segm").read_bytes()
        assert run_cli(
            "--config", "toy.cfg", "infer", "--checkpoint", "out/best.ckpt",
            "--scene", str(scene_file), "--output", "out/map.segm",
        ) == 0
        assert (workdir / "out" / "map.segm").read_bytes() == first

        capsys.readouterr()
        assert run_cli(
            "--config", "toy.cfg", "bench", "--size", "32", "--repeats", "3",
            "--warmup", "1", "--variants", "convtr,autoencoder",
        ) == 0
        bench_out = capsys.readouterr().out
        assert "convtr" in bench_out and "autoencoder" in bench_out
        assert "median_ms" in bench_out

    def test_train_resume_continues_epoch_numbering(self, workdir, capsys):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        assert run_cli("--config", "toy.cfg", "train") == 0
        capsys.readouterr()
        assert run_cli("--config", "toy.cfg", "--set", "train.epochs=2",
                       "train", "--resume") == 0
        out = capsys.readouterr().out
        assert "epoch=1" in out
        assert (workdir / "out" / "epoch_0001.ckpt").exists()

    def test_transformer_only_patch_cap_rejected_at_cli(self, workdir):
        assert run_cli(
            "--config", "toy.cfg", "--set", "model.variant=transformer_only",
            "--set", "model.patch=512", "train",
        ) == 1

    def test_missing_checkpoint_is_data_error(self, workdir):
        assert run_cli("--config", "toy.cfg", "eval", "--checkpoint", "nope.ckpt") == 2

    def test_gradcheck_broken_backward_exits_4_naming_layer(self, workdir, capsys,
                                                            monkeypatch):
        from convtr import layers

        def broken(mask, gy):
            return np.where(mask, gy, 0.0) * 1.5

        monkeypatch.setattr(layers, "relu_backward", broken)
        assert run_cli("gradcheck") == 4
        out = capsys.readouterr().out
        assert "relu" in out
        assert "FAIL" in out

    def test_env_var_overrides_output_dir(self, workdir, monkeypatch, capsys):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        monkeypatch.setenv(cli.OUTPUT_ENV_VAR, str(workdir / "envout"))
        assert run_cli("--config", "toy.cfg", "train") == 0
        assert (workdir / "envout" / "best.ckpt").exists()

    def test_out_flag_beats_env_var(self, workdir, monkeypatch):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        monkeypatch.setenv(cli.OUTPUT_ENV_VAR, str(workdir / "envout"))
        assert run_cli("--config", "toy.cfg", "--out", str(workdir / "flagout"),
                       "train") == 0
        assert (workdir / "flagout" / "best.ckpt").exists()
        assert not (workdir / "envout").exists()

    def test_seed_flag_changes_synth_output(self, workdir):
        assert run_cli("--config", "toy.cfg", "synth") == 0
        first = sorted(p.name for p in (workdir / "scenes").glob("*.scne"))
        assert run_cli("--config", "toy.cfg", "--seed", "99", "synth") == 0
        second = sorted(p.name for p in (workdir / "scenes").glob("*.scne"))
        assert first != second

    def test_eval_perfect_oracle_checkpoint_reports_exactly_one(self, workdir, capsys):
        """A hand-built linear-classifier checkpoint on a near-noiseless scene
        separates every pixel, so cmd_eval must print mIoU 1.0000."""
        from convtr.checkpoint import checkpoint_save
        from convtr.data import SynthConfig, compute_channel_stats, generate_synthetic_scene, scene_save
        from convtr.model import ModelConfig, build_model
        from convtr.optim import TrainConfig, adam_init
        from convtr.train import TrainData, make_checkpoint

        synth = SynthConfig(height=96, width=96, smoothness=10.0, looks=1e7,
                            hh_std_db=(1e-3,) * 3, hv_std_db=(1e-3,) * 3, seed=5)
        scene = generate_synthetic_scene(synth)
        stats = compute_channel_stats([scene])
        (workdir / "oracle").mkdir()
        scene_save(scene, workdir / "oracle" / f"{scene.id}.scne")

        mcfg = ModelConfig(patch=32, classes=3, depth=1, heads=2, d_head=None,
                           variant="transformer_only", precision="single")
        params = build_model(mcfg, 0)
        for blk in params.core:
            blk.attn.wo.data[...] = 0
            blk.attn.wo_bias.data[...] = 0
            blk.pw.weights.data[...] = 0
            blk.pw.bias.data[...] = 0
        params.entry.weights.data[...] = 0
        params.entry.weights.data[0, 0, 0, 0] = 1.0
        params.entry.weights.data[1, 1, 0, 0] = 1.0
        params.entry.bias.data[...] = 0
        mu = np.zeros((3, 2))
        for c in range(3):
            linear = np.array([10.0 ** (synth.hh_mean_db[c] / 10.0),
                               10.0 ** (synth.hv_mean_db[c] / 10.0)])
            mu[c] = (linear - stats.mean) / stats.std
        params.exit.weights.data[...] = 0
        for c in range(3):
            params.exit.weights.data[c, 0, 0, 0] = 2.0 * mu[c, 0]
            params.exit.weights.data[c, 1, 0, 0] = 2.0 * mu[c, 1]
            params.exit.bias.data[c] = -(mu[c] ** 2).sum()

        tcfg = TrainConfig(seed=0)
        data = TrainData([scene], [], stats, np.ones(3))
        ckpt = make_checkpoint(params, mcfg, tcfg, adam_init(params.named_parameters()),
                               epoch=0, best_metric=1.0, best_epoch=0, data=data)
        checkpoint_save(ckpt, workdir / "oracle.ckpt")

        assert run_cli("--config", "toy.cfg", "eval", "--checkpoint",
                       str(workdir / "oracle.ckpt"),
                       "--scenes", str(workdir / "oracle")) == 0
        out = capsys.readouterr().out
        assert "mIoU: 1.0000" in out
