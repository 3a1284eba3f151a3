"""Training loop: config validation, augmentation, steps, checkpoints, resume."""

import csv
import dataclasses

import pytest
import torch

from camodiff.data_io import SynthConfig, generate_synthetic
from camodiff.errors import CheckpointError, ConfigError, DataError, DivergenceError
from camodiff.model import ModelConfig
from camodiff.seeding import derive_seed, make_generator
from camodiff.trainer import (CHECKPOINT_FORMAT_VERSION, TrainConfig, _batch_indices,
                              augment, checkpoint_dict, init_train_state,
                              load_checkpoint, restore_train_state, save_checkpoint,
                              train, train_step)

TINY_MODEL = ModelConfig(unet_widths=(8, 8, 16, 16, 16), cond_channels=8,
                         encoder_widths=(4, 8, 8, 8))


def tiny_config(**kw):
    args = dict(num_steps=8, batch_size=2, image_size=(32, 32), max_steps=2,
                learning_rate=1e-3, seed=3, checkpoint_interval=100)
    args.update(kw)
    return TrainConfig(**args)


def random_batch(b=2, hw=32, seed=5):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(b, 3, hw, hw, generator=g)
    masks = (torch.rand(b, 1, hw, hw, generator=g) < 0.3).float()
    return images, masks


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(count=8, image_size=32, seed=11)
    return generate_synthetic(cfg, root)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.num_steps == 1000 and cfg.image_size == (64, 64)

    @pytest.mark.parametrize("kw", [
        dict(num_steps=0),
        dict(beta_start=0.0),
        dict(beta_start=0.3, beta_end=0.2),
        dict(beta_end=1.0),
        dict(learning_rate=0.0),
        dict(batch_size=0),
        dict(image_size=(48, 64)),
        dict(image_size=(0, 0)),
        dict(max_steps=-1),
        dict(lambda_vlb=-0.1),
        dict(jitter_strength=1.0),
        dict(crop_min_scale=0.0),
        dict(checkpoint_interval=0),
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestSeeding:
    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(3, "step", 0) == derive_seed(3, "step", 0)
        assert derive_seed(3, "step", 0) != derive_seed(3, "step", 1)
        assert derive_seed(3, "step", 0) != derive_seed(4, "step", 0)
        assert derive_seed(3, "epoch", 0) != derive_seed(3, "step", 0)

    def test_batch_indices_stateless_and_covering(self):
        cfg = tiny_config(batch_size=4)
        a = _batch_indices(12, 5, cfg)
        b = _batch_indices(12, 5, cfg)
        assert a == b and len(a) == 4
        seen = set()
        for step in range(3):
            seen.update(_batch_indices(12, step, cfg))
        assert seen == set(range(12))

    def test_batch_indices_small_dataset_fills_batch(self):
        cfg = tiny_config(batch_size=8)
        idx = _batch_indices(3, 0, cfg)
        assert len(idx) == 8 and set(idx) == {0, 1, 2}


class TestAugment:
    def test_all_off_is_resize_passthrough(self):
        cfg = tiny_config(flip_augment=False, crop_augment=False, jitter_augment=False)
        images, masks = random_batch(b=1)
        g = make_generator(0)
        out_img, out_mask = augment(images[0], masks[0], g, cfg)
        assert torch.equal(out_img, images[0])
        assert torch.equal(out_mask, masks[0])

    def test_flip_consistent_between_image_and_mask(self):
        cfg = tiny_config(crop_augment=False, jitter_augment=False)
        images, masks = random_batch(b=1)
        flipped_seen = unflipped_seen = False
        for s in range(20):
            g = make_generator(s)
            out_img, out_mask = augment(images[0], masks[0], g, cfg)
            if torch.equal(out_img, images[0]):
                assert torch.equal(out_mask, masks[0])
                unflipped_seen = True
            else:
                assert torch.equal(out_img, torch.flip(images[0], dims=[-1]))
                assert torch.equal(out_mask, torch.flip(masks[0], dims=[-1]))
                flipped_seen = True
        assert flipped_seen and unflipped_seen

    def test_crop_matches_manual_slice(self):
        cfg = tiny_config(flip_augment=False, jitter_augment=False)
        images, masks = random_batch(b=1)
        g = make_generator(9)
        probe = make_generator(9)
        scale = cfg.crop_min_scale + (1.0 - cfg.crop_min_scale) * torch.rand((), generator=probe).item()
        ch = max(1, int(round(32 * scale)))
        top = int(torch.randint(0, 32 - ch + 1, (), generator=probe))
        left = int(torch.randint(0, 32 - ch + 1, (), generator=probe))
        out_img, out_mask = augment(images[0], masks[0], g, cfg)
        ref = torch.nn.functional.interpolate(
            images[0][None, :, top:top + ch, left:left + ch], size=(32, 32),
            mode="bilinear", align_corners=False)[0]
        assert torch.equal(out_img, ref)
        assert set(out_mask.unique().tolist()) <= {0.0, 1.0}

    def test_jitter_changes_image_only(self):
        cfg = tiny_config(flip_augment=False, crop_augment=False)
        images, masks = random_batch(b=1)
        changed = False
        for s in range(5):
            out_img, out_mask = augment(images[0], masks[0], make_generator(s), cfg)
            assert torch.equal(out_mask, masks[0])
            assert out_img.min() >= 0.0 and out_img.max() <= 1.0
            changed = changed or not torch.equal(out_img, images[0])
        assert changed

    def test_mask_stays_binary_under_full_pipeline(self):
        cfg = tiny_config()
        images, masks = random_batch(b=1)
        for s in range(10):
            _, out_mask = augment(images[0], masks[0], make_generator(s), cfg)
            assert set(out_mask.unique().tolist()) <= {0.0, 1.0}

    def test_rejects_misaligned_pair(self):
        cfg = tiny_config()
        with pytest.raises(DataError):
            augment(torch.rand(3, 32, 32), torch.rand(1, 16, 16), make_generator(0), cfg)


class TestTrainStep:
    def test_deterministic_under_fixed_seed(self):
        cfg = tiny_config()
        batch = random_batch()
        states = []
        for _ in range(2):
            state = init_train_state(cfg, TINY_MODEL)
            train_step(batch, state, cfg, make_generator(cfg.seed, "step", 0))
            states.append(state.model.state_dict())
        for k in states[0]:
            assert torch.equal(states[0][k], states[1][k]), k

    def test_loss_finite_and_positive(self):
        cfg = tiny_config()
        state = init_train_state(cfg, TINY_MODEL)
        _, breakdown = train_step(random_batch(), state, cfg, make_generator(0))
        total = float(breakdown.total.detach())
        assert total > 0.0 and torch.isfinite(breakdown.total)
        assert state.step == 1

    def test_parameters_change(self):
        cfg = tiny_config()
        state = init_train_state(cfg, TINY_MODEL)
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        train_step(random_batch(), state, cfg, make_generator(0))
        changed = any(not torch.equal(before[k], v)
                      for k, v in state.model.state_dict().items())
        assert changed

    def test_divergence_reports_batch_index(self):
        cfg = tiny_config()
        state = init_train_state(cfg, TINY_MODEL)
        images, masks = random_batch()
        images = images.clone()
        images[1, 0, 0, 0] = float("nan")
        with pytest.raises(DivergenceError) as exc:
            train_step((images, masks), state, cfg, make_generator(0))
        assert exc.value.batch_index == 1
        assert exc.value.step == 1


class TestCheckpoint:
    def _trained_state(self, steps=2):
        cfg = tiny_config()
        state = init_train_state(cfg, TINY_MODEL)
        for s in range(steps):
            train_step(random_batch(seed=s), state, cfg,
                       make_generator(cfg.seed, "step", s))
        return state, cfg

    def test_round_trip_bitwise_forward(self, tmp_path):
        state, cfg = self._trained_state()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, state, cfg)
        restored, restored_cfg = load_checkpoint(path)
        assert restored.step == state.step
        assert restored_cfg == cfg
        images, masks = random_batch(seed=21)
        t = torch.tensor([3, 5])
        yt = torch.randn(masks.shape, generator=torch.Generator().manual_seed(2))
        for model in (state.model, restored.model):
            model.eval()
        with torch.no_grad():
            feat_a = state.model.conditioning_features(images)
            feat_b = restored.model.conditioning_features(images)
            out_a = state.model.denoise(images, yt, t, feat_a)
            out_b = restored.model.denoise(images, yt, t, feat_b)
        assert torch.equal(out_a.eps, out_b.eps)
        assert torch.equal(out_a.v, out_b.v)

    def test_round_trip_preserves_optimizer_moments(self, tmp_path):
        state, cfg = self._trained_state()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, state, cfg)
        restored, _ = load_checkpoint(path)
        batch = random_batch(seed=33)
        rng_a = make_generator(cfg.seed, "step", 2)
        rng_b = make_generator(cfg.seed, "step", 2)
        train_step(batch, state, cfg, rng_a)
        train_step(batch, restored, cfg, rng_b)
        sa, sb = state.model.state_dict(), restored.model.state_dict()
        for k in sa:
            assert torch.equal(sa[k], sb[k]), k

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_corrupt_file_raises(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_raises(self):
        state, cfg = self._trained_state(steps=0)
        payload = checkpoint_dict(state, cfg)
        payload["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
        with pytest.raises(CheckpointError):
            restore_train_state(payload)

    def test_missing_keys_raise(self):
        with pytest.raises(CheckpointError):
            restore_train_state({"format_version": CHECKPOINT_FORMAT_VERSION})


class TestTrain:
    def test_empty_dataset_rejected(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        empty = dataclasses.replace(tiny_dataset, stems=[])
        with pytest.raises(DataError):
            train(empty, cfg, tmp_path / "out")

    def test_max_steps_zero_returns_init(self, tiny_dataset, tmp_path):
        cfg = tiny_config(max_steps=0)
        payload = train(tiny_dataset, cfg, tmp_path / "out", TINY_MODEL)
        assert payload["step"] == 0
        fresh = init_train_state(cfg, TINY_MODEL)
        for k, v in fresh.model.state_dict().items():
            assert torch.equal(v, payload["model_state"][k]), k
        rows = (tmp_path / "out" / "loss_log.csv").read_text().strip().splitlines()
        assert rows == ["step,simple,vlb,static,total"]

    def test_writes_log_and_checkpoints(self, tiny_dataset, tmp_path):
        cfg = tiny_config(max_steps=4, checkpoint_interval=2)
        out = tmp_path / "out"
        payload = train(tiny_dataset, cfg, out, TINY_MODEL)
        assert payload["step"] == 4
        assert (out / "ckpt_step2.pt").is_file()
        assert (out / "ckpt_step4.pt").is_file()
        assert (out / "ckpt_final.pt").is_file()
        with open(out / "loss_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "simple", "vlb", "static", "total"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
        for r in rows[1:]:
            total = float(r[4])
            assert total > 0.0
            parts = float(r[1]) + cfg.lambda_vlb * float(r[2]) + float(r[3])
            assert abs(parts - total) < 1e-6

    def test_resume_reproduces_loss_log(self, tiny_dataset, tmp_path):
        cfg_full = tiny_config(max_steps=6)
        full_rows = self._run_rows(tiny_dataset, cfg_full, tmp_path / "full")
        cfg_half = dataclasses.replace(cfg_full, max_steps=3)
        train(tiny_dataset, cfg_half, tmp_path / "half", TINY_MODEL)
        resumed_rows = self._run_rows(
            tiny_dataset, cfg_full, tmp_path / "resumed",
            resume=tmp_path / "half" / "ckpt_final.pt")
        assert resumed_rows == full_rows[3:]

    def _run_rows(self, dataset, cfg, out, resume=None):
        train(dataset, cfg, out, TINY_MODEL, resume=resume)
        with open(out / "loss_log.csv") as fh:
            return list(csv.reader(fh))[1:]
