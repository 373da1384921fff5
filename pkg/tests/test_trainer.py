import copy
import math

import pytest
import torch
import torch.nn as nn

from revoice.adversarial import DiscriminatorConfig
from revoice.errors import CheckpointMismatchError, ConfigError, InvalidInputError
from revoice.networks import ArchitectureConfig
from revoice.trainer import (
    EMAState,
    ExperimentPreset,
    SegmentSampler,
    TrainConfig,
    Trainer,
    checkpoint_load,
    checkpoint_save,
    desk_preset,
    ema_update,
    load_enhancement_model,
    lr_at_step,
    paper_preset,
    step_seed,
)

PAPER_SCHEDULE = TrainConfig(
    total_steps=1_500_000,
    warmup_steps=50_000,
    decay_start=1_000_000,
    decay_end=1_500_000,
    lr_min=1e-6,
    lr_peak=1e-4,
)


def tiny_preset(**train_overrides) -> ExperimentPreset:
    fields = dict(
        total_steps=20,
        warmup_steps=2,
        decay_start=10,
        decay_end=20,
        lr_peak=4e-4,
        batch_size=2,
        segment_seconds=0.3,
    )
    fields.update(train_overrides)
    train = TrainConfig(**fields)
    return ExperimentPreset(
        train=train,
        arch=ArchitectureConfig(base_channels=8),
        disc=DiscriminatorConfig(
            periods=(2, 3), resolutions=((256, 64),), mpd_channels=(4, 8), mrd_channels=4
        ),
        sample_rate=8000,
    )


def tone_pair(seed: int, n: int = 2400):
    gen = torch.Generator().manual_seed(seed)
    t = torch.arange(n) / 8000.0
    clean = (0.3 * torch.sin(2 * torch.pi * 220 * t)).reshape(1, 1, -1)
    degraded = clean + 0.1 * torch.randn(clean.shape, generator=gen)
    return clean.expand(2, 1, n).clone(), degraded.expand(2, 1, n).clone()


class TestTrainConfig:
    def test_breakpoint_order_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=500, decay_start=100)
        with pytest.raises(ConfigError):
            TrainConfig(decay_end=3000, total_steps=2000)

    def test_lr_bounds(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_min=1e-4, lr_peak=1e-4)

    def test_loss_mode_and_ema(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss_mode="vae")
        with pytest.raises(ConfigError):
            TrainConfig(ema_decay=1.0)


class TestLrSchedule:
    def test_published_endpoints(self):
        assert lr_at_step(0, PAPER_SCHEDULE) == pytest.approx(1e-6, rel=1e-12)
        assert lr_at_step(50_000, PAPER_SCHEDULE) == pytest.approx(1e-4, rel=1e-12)
        assert lr_at_step(1_500_000, PAPER_SCHEDULE) == pytest.approx(1e-6, rel=1e-12)

    def test_cosine_midpoint(self):
        mid = (1_000_000 + 1_500_000) // 2
        assert lr_at_step(mid, PAPER_SCHEDULE) == pytest.approx(5.05e-5, rel=1e-9)

    def test_plateau(self):
        for step in (50_000, 300_000, 1_000_000):
            assert lr_at_step(step, PAPER_SCHEDULE) == 1e-4

    def test_continuity_at_breakpoints(self):
        cfg = PAPER_SCHEDULE
        for bp in (cfg.warmup_steps, cfg.decay_start, cfg.decay_end):
            left = lr_at_step(bp - 1, cfg)
            right = lr_at_step(min(bp + 1, cfg.total_steps), cfg)
            here = lr_at_step(bp, cfg)
            span = cfg.lr_peak - cfg.lr_min
            assert abs(here - left) < 0.01 * span
            assert abs(here - right) < 0.01 * span

    def test_piecewise_monotone(self):
        cfg = PAPER_SCHEDULE
        values = [lr_at_step(s, cfg) for s in range(0, cfg.total_steps + 1, 10_000)]
        peak_idx = values.index(max(values))
        assert all(a <= b + 1e-15 for a, b in zip(values[:peak_idx], values[1 : peak_idx + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(values[peak_idx:], values[peak_idx + 1 :]))

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            lr_at_step(-1, PAPER_SCHEDULE)
        with pytest.raises(InvalidInputError):
            lr_at_step(1_500_001, PAPER_SCHEDULE)


class TestEma:
    def test_fixed_point(self):
        layer = nn.Linear(3, 3)
        state = EMAState.from_module(layer, 0.999)
        for _ in range(5):
            ema_update(state, layer)
        # d*w + (1-d)*w rounds at each update, so the fixed point holds to ulps
        for name, p in layer.named_parameters():
            torch.testing.assert_close(state.shadow[name], p, rtol=1e-6, atol=1e-8)

    def test_geometric_series(self):
        layer = nn.Linear(4, 4).double()
        with torch.no_grad():
            for p in layer.parameters():
                p.fill_(1.0)
        state = EMAState.from_module(layer, 0.999)
        for tensor in state.shadow.values():
            tensor.zero_()
        k = 25
        for _ in range(k):
            ema_update(state, layer)
        want = 1.0 - 0.999**k
        for tensor in state.shadow.values():
            assert torch.all((tensor - want).abs() < 1e-10)
        assert state.step == k

    def test_zero_decay_copies(self):
        layer = nn.Linear(3, 3)
        state = EMAState.from_module(layer, 0.0)
        with torch.no_grad():
            layer.weight.add_(1.0)
        ema_update(state, layer)
        torch.testing.assert_close(state.shadow["weight"], layer.weight, rtol=0, atol=0)

    def test_shape_drift_rejected(self):
        layer = nn.Linear(3, 3)
        state = EMAState.from_module(layer, 0.999)
        state.shadow["weight"] = torch.zeros(2, 2)
        with pytest.raises(InvalidInputError, match="shape drift"):
            ema_update(state, layer)
        del state.shadow["weight"]
        with pytest.raises(InvalidInputError, match="missing"):
            ema_update(state, layer)


class TestStepSeed:
    def test_deterministic_and_distinct(self):
        assert step_seed(0, 5) == step_seed(0, 5)
        seeds = {step_seed(0, s) for s in range(100)}
        assert len(seeds) == 100
        assert step_seed(0, 5, stream=1) != step_seed(0, 5, stream=0)


class TestSegmentSampler:
    def test_reproducible_and_aligned(self):
        clean = torch.arange(16000, dtype=torch.float32).reshape(1, -1)
        degraded = clean + 7.0
        sampler = SegmentSampler([(clean, degraded)], 8000, 0.5, seed=3)
        c1, d1 = sampler.batch(step=4, batch_size=3)
        c2, d2 = sampler.batch(step=4, batch_size=3)
        assert torch.equal(c1, c2) and torch.equal(d1, d2)
        torch.testing.assert_close(d1 - c1, torch.full_like(c1, 7.0), rtol=0, atol=0)
        assert c1.shape == (3, 1, 4000)
        c3, _ = sampler.batch(step=5, batch_size=3)
        assert not torch.equal(c1, c3)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            SegmentSampler([], 8000, 0.5, seed=0)
        short = torch.zeros(1, 100)
        with pytest.raises(InvalidInputError, match="shorter"):
            SegmentSampler([(short, short)], 8000, 0.5, seed=0)
        a, b = torch.zeros(1, 8000), torch.zeros(1, 8001)
        with pytest.raises(InvalidInputError, match="mismatch"):
            SegmentSampler([(a, b)], 8000, 0.5, seed=0)


class TestTrainStep:
    def test_deterministic_given_seed(self):
        clean, degraded = tone_pair(0)
        records = []
        for _ in range(2):
            torch.manual_seed(0)
            trainer = Trainer(tiny_preset())
            run = [trainer.train_step(clean, degraded) for _ in range(3)]
            records.append(run)
        for a, b in zip(*records):
            assert a == b

    def test_adversarial_record_keys(self):
        torch.manual_seed(0)
        trainer = Trainer(tiny_preset())
        record = trainer.train_step(*tone_pair(1))
        assert {"disc", "score", "adv", "fm", "mel", "gen_total", "lr", "step"} <= set(record)
        assert "mdn_mel" not in record

    def test_mdn_toggle_swaps_loss_arms(self):
        torch.manual_seed(0)
        trainer = Trainer(tiny_preset(loss_mode="mdn"))
        assert trainer.discriminators is None
        record = trainer.train_step(*tone_pair(2))
        assert {"score", "mdn_mel", "mdn_wave", "gen_total"} <= set(record)
        assert "adv" not in record and "disc" not in record

    def test_optimizers_touch_disjoint_parameters(self):
        torch.manual_seed(0)
        trainer = Trainer(tiny_preset())
        gen_ids = {id(p) for g in trainer.opt_gen.param_groups for p in g["params"]}
        disc_ids = {id(p) for g in trainer.opt_disc.param_groups for p in g["params"]}
        assert gen_ids.isdisjoint(disc_ids)
        model_ids = {id(p) for p in trainer.model.cond_net.parameters()}
        model_ids |= {id(p) for p in trainer.model.score_net.parameters()}
        assert model_ids <= gen_ids

    def test_nonfinite_batch_skips_update(self, caplog):
        torch.manual_seed(0)
        trainer = Trainer(tiny_preset())
        clean, degraded = tone_pair(3)
        clean[0, 0, 10] = float("nan")
        before = trainer.model.score_net.out_conv.bias.detach().clone()
        with caplog.at_level("WARNING"):
            record = trainer.train_step(clean, degraded)
        assert record["skipped"]
        assert any("skip" in r.message for r in caplog.records)
        torch.testing.assert_close(
            trainer.model.score_net.out_conv.bias, before, rtol=0, atol=0
        )

    def test_shape_mismatch_rejected(self):
        torch.manual_seed(0)
        trainer = Trainer(tiny_preset())
        with pytest.raises(InvalidInputError):
            trainer.train_step(torch.zeros(2, 1, 2400), torch.zeros(2, 1, 2401))


class TestCheckpoint:
    def test_continuation_is_bit_identical(self, tmp_path):
        clean, degraded = tone_pair(4)
        torch.manual_seed(1)
        trainer = Trainer(tiny_preset())
        for _ in range(3):
            trainer.train_step(clean, degraded)
        path = checkpoint_save(trainer, tmp_path / "3.ckpt")
        straight = [trainer.train_step(clean, degraded) for _ in range(10)]

        torch.manual_seed(2)  # deliberately different init; load must overwrite all of it
        resumed = Trainer(tiny_preset())
        checkpoint_load(path, resumed)
        assert resumed.step == 3
        replay = [resumed.train_step(clean, degraded) for _ in range(10)]
        assert straight == replay
        for (n1, p1), (n2, p2) in zip(
            trainer.model.score_net.named_parameters(), resumed.model.score_net.named_parameters()
        ):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_config_mismatch_refused(self, tmp_path):
        torch.manual_seed(1)
        trainer = Trainer(tiny_preset())
        path = checkpoint_save(trainer, tmp_path / "0.ckpt")
        other = tiny_preset(batch_size=3)
        with pytest.raises(CheckpointMismatchError, match="batch_size"):
            checkpoint_load(path, Trainer(other))

    def test_ema_selectable_at_load(self, tmp_path):
        clean, degraded = tone_pair(5)
        torch.manual_seed(1)
        trainer = Trainer(tiny_preset())
        for _ in range(3):
            trainer.train_step(clean, degraded)
        path = checkpoint_save(trainer, tmp_path / "3.ckpt")
        raw, _ = load_enhancement_model(path, use_ema=False)
        ema, _ = load_enhancement_model(path, use_ema=True)
        torch.testing.assert_close(
            raw.score_net.out_conv.bias, trainer.model.score_net.out_conv.bias, rtol=0, atol=0
        )
        diff = (ema.score_net.out_conv.bias - raw.score_net.out_conv.bias).abs().max()
        assert diff > 0  # three optimizer steps moved the raw weights off the shadow


class TestPresets:
    def test_desk_preset_is_cpu_sized(self):
        preset = desk_preset()
        assert preset.train.total_steps == 2000
        assert preset.arch.base_channels == 8
        assert preset.train.segment_seconds == 1.0

    def test_paper_preset_records_published_schedule(self):
        preset = paper_preset()
        assert preset.train.total_steps == 1_500_000
        assert preset.train.warmup_steps == 50_000
        assert preset.train.batch_size == 40
        assert preset.train.segment_seconds == 2.0
        assert preset.arch.base_channels == 48
        assert preset.sampler_steps == 8 and preset.sampler_epsilon == 1.3

    def test_sampler_config_roundtrip(self):
        cfg = desk_preset().sampler_config()
        assert cfg.num_steps == 8
        assert cfg.gamma == pytest.approx((1e-4) ** (1 / 8) * (5e-4 / 5) ** 0, rel=1)
        assert cfg.gamma == pytest.approx((5e-4 / 5.0) ** (1 / 8), rel=1e-12)
