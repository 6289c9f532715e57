"""Run configuration text format and binary checkpoints."""
import dataclasses
import struct

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hashsdf.checkpoint import (MAGIC, CheckpointError, field_from_checkpoint, load_checkpoint,
                                save_field)
from hashsdf.config import ConfigError, RunConfig, scaled_schedule
from hashsdf.synthetic import load_dataset, make_dataset
from hashsdf.training import Trainer, schedule_at


def tiny_run(**kw):
    base = dict(levels=3, min_res=8, max_res=24, channels=2, table_log2=10, sdf_hidden=16,
                feature_dim=4, color_hidden=16, color_layers=2, n_uniform=8, n_importance=4,
                importance_rounds=1, rays_per_batch=16, iterations=6, activation_interval=2,
                lr_warmup=2, curv_warmup=2, lr_milestones=(4, 5), init_active_levels=1,
                log_every=1, ckpt_every=3)
    base.update(kw)
    return RunConfig(**base)


class TestRunConfig:
    """Typed key = value configuration."""

    def test_defaults_valid(self):
        cfg = RunConfig()
        assert cfg.mode == "NG+P" and cfg.iterations == 5000 and cfg.activation_interval == 500

    def test_full_scale_values(self):
        cfg = RunConfig.full_scale()
        assert (cfg.levels, cfg.min_res, cfg.max_res, cfg.channels) == (16, 32, 2048, 8)
        assert cfg.table_log2 == 22 and cfg.lr == 1e-3 and cfg.iterations == 500_000
        assert cfg.lr_milestones == (300_000, 400_000) and cfg.w_eik == 0.1

    def test_round_trip(self):
        cfg = RunConfig(mode="AG+P", lr_milestones=(10, 20), exposure=True, lr=3e-3)
        assert RunConfig.from_text(cfg.to_text()) == cfg
        assert RunConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()

    @given(lr=st.floats(1e-6, 1.0), seed=st.integers(0, 2 ** 31), w=st.floats(0, 1),
           mode=st.sampled_from(["AG", "AG+P", "NG", "NG+P"]), emb=st.booleans())
    def test_round_trip_property(self, lr, seed, w, mode, emb):
        cfg = RunConfig(lr=lr, seed=seed, w_curv=w, mode=mode, use_embedding=emb)
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.from_text("# header\n\nlr = 0.5  # inline\nmode = AG\n")
        assert cfg.lr == 0.5 and cfg.mode == "AG"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys: bogus"):
            RunConfig.from_text("bogus = 1\n")

    @pytest.mark.parametrize("text", ["mode = XG", "iterations = ten", "lr = -1",
                                      "init_active_levels = 99", "levels", "exposure = maybe",
                                      "lr_milestones = 5, 3", "rays_per_batch = 0"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text + "\n")

    def test_environment_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("lr = 0.5\nseed = 3\n")
        cfg = RunConfig.load(path, env={"HSDF_SEED": "9", "HSDF_MODE": "AG", "OTHER": "x"})
        assert (cfg.lr, cfg.seed, cfg.mode) == (0.5, 9, "AG")

    def test_keyword_override_wins(self):
        cfg = RunConfig.load(None, env={"HSDF_SEED": "9"}, seed=4)
        assert cfg.seed == 4

    def test_mode_flags(self):
        assert RunConfig(mode="NG+P").numerical and RunConfig(mode="NG+P").progressive
        assert not RunConfig(mode="AG").numerical and not RunConfig(mode="AG").progressive

    def test_hash_ignores_paths(self):
        a, b = RunConfig(), RunConfig(data_dir="/x", out_dir="/y")
        assert a.hash() == b.hash() != RunConfig(seed=1).hash()

    def test_resume_key_ignores_length(self):
        assert RunConfig(iterations=10).resume_key() == RunConfig(iterations=20).resume_key()
        assert RunConfig(lr=0.1).resume_key() != RunConfig(lr=0.2).resume_key()

    def test_every_field_documented_type(self):
        for f in dataclasses.fields(RunConfig):
            assert type(f.default) in (int, float, str, bool, tuple), f.name


class TestScaledSchedule:
    """Proportional compression of all iteration counts."""

    def test_halving(self):
        cfg = scaled_schedule(RunConfig(), 2500)
        assert cfg.iterations == 2500 and cfg.activation_interval == 250
        assert cfg.lr_warmup == 250 and cfg.curv_warmup == 250
        assert cfg.lr_milestones == (1500, 2000)

    def test_full_to_desk(self):
        cfg = scaled_schedule(RunConfig.full_scale(), 5000)
        assert cfg.activation_interval == 50 and cfg.lr_milestones == (3000, 4000)

    def test_zero_rejected(self):
        with pytest.raises(ConfigError):
            scaled_schedule(RunConfig(iterations=0), 10)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = make_dataset("SPHERE", tmp_path_factory.mktemp("ckpt_ds"), n_views=3, image_size=8,
                        n_test=1, n_points=200)
    return load_dataset(root)


class TestCheckpoint:
    """Versioned binary checkpoint files."""

    def test_field_round_trip(self, tmp_path, small_ds):
        cfg = tiny_run()
        trainer = Trainer(cfg, small_ds)
        with torch.no_grad():
            trainer.field.grid.tables.uniform_(-0.3, 0.3)
        path = trainer.save(tmp_path / "a.hsdf")
        field, cfg2 = field_from_checkpoint(load_checkpoint(path))
        assert cfg2 == cfg
        for (n1, p1), (n2, p2) in zip(trainer.field.named_parameters(), field.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_sections_and_state(self, tmp_path, small_ds):
        trainer = Trainer(tiny_run(), small_ds)
        for _ in range(3):
            trainer.step()
        ck = load_checkpoint(trainer.save(tmp_path / "b.hsdf"))
        st = ck.trainer_state
        assert st["iteration"] == 3
        assert st["schedule"]["active_levels"] == schedule_at(3, trainer.schedule).active_levels
        assert ck.sections["config_hash"] == trainer.config.hash()
        assert any(k.startswith("optim/") for k in ck.sections)

    def test_resume_next_step_bit_exact(self, tmp_path, small_ds):
        ds = small_ds
        a = Trainer(tiny_run(), ds)
        for _ in range(3):
            a.step()
        path = a.save(tmp_path / "c.hsdf")
        rec_a = a.step()
        b = Trainer(tiny_run(), ds)
        b.load(path)
        rec_b = b.step()
        assert rec_a == rec_b
        for p, q in zip(a.field.parameters(), b.field.parameters()):
            assert torch.equal(p, q)

    def test_resume_with_longer_run_allowed(self, tmp_path, small_ds):
        ds = small_ds
        a = Trainer(tiny_run(iterations=4), ds)
        a.train()
        path = a.save(tmp_path / "d.hsdf")
        b = Trainer(tiny_run(iterations=6), ds)
        b.load(path)
        assert b.iteration == 4

    def test_resume_with_other_settings_rejected(self, tmp_path, small_ds):
        ds = small_ds
        path = Trainer(tiny_run(), ds).save(tmp_path / "e.hsdf")
        with pytest.raises(CheckpointError):
            Trainer(tiny_run(lr=0.5), ds).load(path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.hsdf"
        p.write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "x.hsdf"
        p.write_bytes(MAGIC + struct.pack("<II", 99, 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path, small_ds):
        path = Trainer(tiny_run(), small_ds).save(tmp_path / "t.hsdf")
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_save_field_without_optimizer(self, tmp_path):
        from hashsdf.field import NeuralField
        cfg = tiny_run()
        field = NeuralField(cfg.field_config(), 0)
        save_field(tmp_path / "f.hsdf", field, cfg)
        back, _ = field_from_checkpoint(load_checkpoint(tmp_path / "f.hsdf"))
        x = torch.rand(10, 3) - 0.5
        assert torch.equal(back.sdf(x)[0], field.sdf(x)[0])
