"""Main-stage training loop: learning-rate schedule, weight EMA, alternating
discriminator/generator updates, deterministic per-step seeding, and
checkpointing with bit-identical continuation.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .adversarial import (
    DiscriminatorBank,
    DiscriminatorConfig,
    LossWeights,
    MDNMelHead,
    MDNWaveHead,
    generator_feature_loss,
    lsgan_losses,
    mdn_generator_losses,
)
from .diffusion import NoiseSchedule, SamplerConfig, sampler_params, score_matching_loss
from .errors import CheckpointMismatchError, ConfigError, InvalidInputError
from .networks import ArchitectureConfig, EnhancementModel, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ---------------------------------------------------------------------------
# Config and presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 100
    decay_start: int = 1200
    decay_end: int = 2000
    lr_min: float = 1e-6
    lr_peak: float = 1e-4
    batch_size: int = 4
    segment_seconds: float = 1.0
    ema_decay: float = 0.999
    loss_mode: str = "adversarial"  # or "mdn"
    grad_clip: float = 10.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.99)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.decay_start <= self.decay_end <= self.total_steps:
            raise ConfigError(
                "schedule breakpoints must satisfy 0 <= warmup <= decay_start <= decay_end <= total"
            )
        if not self.lr_min < self.lr_peak:
            raise ConfigError(f"lr_min {self.lr_min} must be below lr_peak {self.lr_peak}")
        if self.loss_mode not in ("adversarial", "mdn"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")


@dataclass(frozen=True)
class ExperimentPreset:
    """Everything needed to reproduce one training run."""

    train: TrainConfig
    arch: ArchitectureConfig
    disc: DiscriminatorConfig
    sample_rate: int
    sampler_steps: int = 8
    sampler_epsilon: float = 1.3

    def sampler_config(self) -> SamplerConfig:
        schedule = NoiseSchedule(sigma_data=self.arch.sigma_data)
        return sampler_params(schedule, self.sampler_steps, self.sampler_epsilon)


def desk_preset(**overrides) -> ExperimentPreset:
    """Small CPU-friendly configuration used by the demo and smoke tests."""
    train = TrainConfig(
        total_steps=2000,
        warmup_steps=50,
        decay_start=1200,
        decay_end=2000,
        lr_peak=4e-4,
        batch_size=4,
        segment_seconds=1.0,
        **overrides,
    )
    arch = ArchitectureConfig(base_channels=8, antialias_stopband_db=45.0)
    disc = DiscriminatorConfig(mpd_channels=(8, 16, 32), mrd_channels=8)
    return ExperimentPreset(train=train, arch=arch, disc=disc, sample_rate=8000)


def paper_preset() -> ExperimentPreset:
    """Full-scale configuration (recorded, not desk-runnable)."""
    train = TrainConfig(
        total_steps=1_500_000,
        warmup_steps=50_000,
        decay_start=1_000_000,
        decay_end=1_500_000,
        lr_peak=1e-4,
        batch_size=40,
        segment_seconds=2.0,
    )
    return ExperimentPreset(
        train=train,
        arch=ArchitectureConfig(base_channels=48),
        disc=DiscriminatorConfig(),
        sample_rate=24000,
    )


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, a flat plateau, then cosine decay back down."""
    if not 0 <= step <= cfg.total_steps:
        raise InvalidInputError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * step / cfg.warmup_steps
    if step <= cfg.decay_start:
        return cfg.lr_peak
    if step >= cfg.decay_end:
        return cfg.lr_min
    frac = (step - cfg.decay_start) / (cfg.decay_end - cfg.decay_start)
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

@dataclass
class EMAState:
    decay: float
    shadow: dict = field(default_factory=dict)  # name -> tensor
    step: int = 0

    @classmethod
    def from_module(cls, module: nn.Module, decay: float) -> "EMAState":
        shadow = {n: p.detach().clone() for n, p in module.named_parameters()}
        return cls(decay=decay, shadow=shadow)


def ema_update(state: EMAState, module: nn.Module) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * current, in place."""
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name not in state.shadow:
                raise InvalidInputError(f"EMA shadow missing parameter {name}")
            if state.shadow[name].shape != param.shape:
                raise InvalidInputError(
                    f"EMA shape drift on {name}: {tuple(state.shadow[name].shape)} vs {tuple(param.shape)}"
                )
            state.shadow[name].mul_(state.decay).add_(param.detach(), alpha=1.0 - state.decay)
    state.step += 1
    return state


def load_ema_into(module: nn.Module, state: EMAState):
    with torch.no_grad():
        for name, param in module.named_parameters():
            param.copy_(state.shadow[name])


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class MDNHeads(nn.Module):
    """Generator-side density heads used when the adversarial arm is toggled off."""

    def __init__(self, arch: ArchitectureConfig, mel_bins: int = 80, components: int = 3):
        super().__init__()
        bottleneck_channels = arch.stage_channels()[-1]
        self.mel = MDNMelHead(bottleneck_channels, mel_bins=mel_bins, components=components)
        self.wave = MDNWaveHead()


def step_seed(seed: int, step: int, stream: int = 0) -> int:
    """Stateless per-step seed so interrupted runs continue identically."""
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1, np.uint64)[0] >> 1)


class Trainer:
    """Alternates a discriminator update on (clean, detached head output) with
    a generator update on score-matching plus adversarial (or density) losses,
    then folds the generator weights into the EMA shadow."""

    def __init__(self, preset: ExperimentPreset, model: EnhancementModel | None = None, weights: LossWeights | None = None):
        self.preset = preset
        self.cfg = preset.train
        self.model = model if model is not None else build_model(preset.arch)
        self.weights = weights or LossWeights()
        self.schedule = NoiseSchedule(sigma_data=preset.arch.sigma_data)
        self.sampler = preset.sampler_config()
        self._generator_module = nn.ModuleDict(
            {"cond": self.model.cond_net, "score": self.model.score_net}
        )
        if self.cfg.loss_mode == "adversarial":
            self.discriminators = DiscriminatorBank(preset.disc)
            self.heads = None
        else:
            self.discriminators = None
            self.heads = MDNHeads(preset.arch)
            self._generator_module["heads"] = self.heads
        gen_params = list(self._generator_module.parameters())
        self.opt_gen = torch.optim.AdamW(
            gen_params, lr=self.cfg.lr_peak, betas=self.cfg.betas, weight_decay=self.cfg.weight_decay
        )
        self.opt_disc = (
            torch.optim.AdamW(
                self.discriminators.parameters(),
                lr=self.cfg.lr_peak,
                betas=self.cfg.betas,
                weight_decay=self.cfg.weight_decay,
            )
            if self.discriminators is not None
            else None
        )
        self.ema = EMAState.from_module(self._generator_module, self.cfg.ema_decay)
        self.step = 0

    # -- helpers ------------------------------------------------------------

    def _set_lr(self, lr: float):
        for opt in filter(None, (self.opt_gen, self.opt_disc)):
            for group in opt.param_groups:
                group["lr"] = lr

    @staticmethod
    def _clip_and_step(opt: torch.optim.Optimizer, module: nn.Module, max_norm: float) -> bool:
        grads_finite = all(
            p.grad is None or bool(torch.all(torch.isfinite(p.grad)))
            for p in module.parameters()
        )
        if not grads_finite:
            return False
        torch.nn.utils.clip_grad_norm_(module.parameters(), max_norm)
        opt.step()
        return True

    # -- main step ----------------------------------------------------------

    def train_step(self, clean: torch.Tensor, degraded: torch.Tensor) -> dict:
        """One optimization step on a (B, 1, T) pair; returns itemized losses."""
        if clean.shape != degraded.shape:
            raise InvalidInputError("clean/degraded batch shapes differ")
        cfg = self.cfg
        lr = lr_at_step(min(self.step, cfg.total_steps), cfg)
        self._set_lr(lr)
        gen = torch.Generator().manual_seed(step_seed(cfg.seed, self.step))
        record = {"step": self.step, "lr": lr, "skipped": False}

        feats, head = self.model.cond_net(degraded)

        if self.discriminators is not None:
            real = self.discriminators(clean)
            fake = self.discriminators(head.detach())
            d_loss, _ = lsgan_losses([r[0] for r in real], [f[0] for f in fake])
            self.opt_disc.zero_grad(set_to_none=True)
            d_loss.backward()
            if not self._clip_and_step(self.opt_disc, self.discriminators, cfg.grad_clip):
                log.warning("step %d: non-finite discriminator gradients, update skipped", self.step)
                record["skipped"] = True
            record["disc"] = float(d_loss.detach())

        score = score_matching_loss(self.model, clean, feats, gen, self.schedule)
        record["score"] = float(score.detach())
        if self.discriminators is not None:
            gan = generator_feature_loss(
                clean, head, self.discriminators, self.weights, self.preset.sample_rate
            )
            total = score + gan["total"]
            record.update(
                adv=float(gan["adv"].detach()),
                fm=float(gan["fm"].detach()),
                mel=float(gan["mel"].detach()),
            )
        else:
            mdn = mdn_generator_losses(
                clean,
                head,
                feats.bottleneck,
                self.heads.mel,
                self.heads.wave,
                self.preset.sample_rate,
                self.preset.arch.hop,
            )
            total = score + mdn["total"]
            record.update(
                mdn_mel=float(mdn["mdn_mel"].detach()), mdn_wave=float(mdn["mdn_wave"].detach())
            )
        record["gen_total"] = float(total.detach())

        if not torch.isfinite(total):
            log.warning("step %d: non-finite generator loss %s, update skipped", self.step, record)
            record["skipped"] = True
        else:
            self.opt_gen.zero_grad(set_to_none=True)
            total.backward()
            if self._clip_and_step(self.opt_gen, self._generator_module, cfg.grad_clip):
                ema_update(self.ema, self._generator_module)
            else:
                log.warning("step %d: non-finite generator gradients, update skipped", self.step)
                record["skipped"] = True

        self.step += 1
        return record


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _config_blob(trainer: Trainer) -> dict:
    preset = trainer.preset
    return {
        "format_version": CHECKPOINT_FORMAT,
        "train": dataclasses.asdict(preset.train),
        "arch": dataclasses.asdict(preset.arch),
        "disc": dataclasses.asdict(preset.disc),
        "sample_rate": preset.sample_rate,
        "sampler_steps": preset.sampler_steps,
        "sampler_epsilon": preset.sampler_epsilon,
    }


def _diff_configs(saved: dict, current: dict, prefix="") -> list:
    diffs = []
    for key in sorted(set(saved) | set(current)):
        a, b = saved.get(key), current.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            diffs += _diff_configs(a, b, prefix=f"{prefix}{key}.")
        elif a != b:
            diffs.append(f"{prefix}{key}: saved={a!r} current={b!r}")
    return diffs


def checkpoint_save(trainer: Trainer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": _config_blob(trainer),
        "step": trainer.step,
        "model": {
            "cond": trainer.model.cond_net.state_dict(),
            "score": trainer.model.score_net.state_dict(),
        },
        "opt_gen": trainer.opt_gen.state_dict(),
        "ema": {"decay": trainer.ema.decay, "step": trainer.ema.step, "shadow": trainer.ema.shadow},
    }
    if trainer.discriminators is not None:
        payload["disc"] = trainer.discriminators.state_dict()
        payload["opt_disc"] = trainer.opt_disc.state_dict()
    if trainer.heads is not None:
        payload["heads"] = trainer.heads.state_dict()
    torch.save(payload, path)
    return path


def checkpoint_load(path, trainer: Trainer) -> Trainer:
    """Restore a trainer in place; refuses checkpoints from a different config."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    saved, current = payload["config"], _config_blob(trainer)
    diffs = _diff_configs(saved, current)
    if diffs:
        raise CheckpointMismatchError(
            "checkpoint config does not match trainer config:\n  " + "\n  ".join(diffs)
        )
    trainer.model.cond_net.load_state_dict(payload["model"]["cond"])
    trainer.model.score_net.load_state_dict(payload["model"]["score"])
    trainer.opt_gen.load_state_dict(payload["opt_gen"])
    if trainer.discriminators is not None:
        trainer.discriminators.load_state_dict(payload["disc"])
        trainer.opt_disc.load_state_dict(payload["opt_disc"])
    if trainer.heads is not None:
        trainer.heads.load_state_dict(payload["heads"])
    trainer.ema = EMAState(
        decay=payload["ema"]["decay"], shadow=payload["ema"]["shadow"], step=payload["ema"]["step"]
    )
    trainer.step = payload["step"]
    return trainer


def load_enhancement_model(path, use_ema: bool = True):
    """Build the model recorded in a checkpoint for inference.

    Returns (model, preset).  With use_ema the shadow weights are loaded
    instead of the raw ones."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = payload["config"]
    if cfg.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {cfg.get('format_version')!r}"
        )
    preset = ExperimentPreset(
        train=TrainConfig(**cfg["train"]),
        arch=ArchitectureConfig(**{**cfg["arch"], "rate_factors": tuple(cfg["arch"]["rate_factors"])}),
        disc=DiscriminatorConfig(
            **{
                **cfg["disc"],
                "periods": tuple(cfg["disc"]["periods"]),
                "resolutions": tuple(tuple(r) for r in cfg["disc"]["resolutions"]),
                "mpd_channels": tuple(cfg["disc"]["mpd_channels"]),
            }
        ),
        sample_rate=cfg["sample_rate"],
        sampler_steps=cfg["sampler_steps"],
        sampler_epsilon=cfg["sampler_epsilon"],
    )
    model = build_model(preset.arch)
    model.cond_net.load_state_dict(payload["model"]["cond"])
    model.score_net.load_state_dict(payload["model"]["score"])
    if use_ema:
        module = nn.ModuleDict({"cond": model.cond_net, "score": model.score_net})
        if payload["config"]["train"]["loss_mode"] == "mdn":
            heads = MDNHeads(preset.arch)
            heads.load_state_dict(payload["heads"])
            module["heads"] = heads
        state = EMAState(
            decay=payload["ema"]["decay"],
            shadow=payload["ema"]["shadow"],
            step=payload["ema"]["step"],
        )
        load_ema_into(module, state)
    return model, preset


# ---------------------------------------------------------------------------
# Deterministic segment batching
# ---------------------------------------------------------------------------

class SegmentSampler:
    """Draws aligned random crops from in-memory (clean, degraded) pairs.

    Sampling at a given step depends only on (seed, step), so dataloading
    stays reproducible across restarts."""

    def __init__(self, pairs, sample_rate: int, segment_seconds: float, seed: int):
        if not pairs:
            raise InvalidInputError("empty training set")
        self.segment = int(round(segment_seconds * sample_rate))
        for clean, degraded in pairs:
            if clean.shape != degraded.shape:
                raise InvalidInputError("clean/degraded length mismatch in training pair")
            if clean.shape[-1] < self.segment:
                raise InvalidInputError(
                    f"utterance shorter than one segment ({clean.shape[-1]} < {self.segment})"
                )
        self.pairs = pairs
        self.seed = seed

    def batch(self, step: int, batch_size: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step, 7]))
        cleans, degradeds = [], []
        for _ in range(batch_size):
            idx = int(rng.integers(len(self.pairs)))
            clean, degraded = self.pairs[idx]
            start = int(rng.integers(clean.shape[-1] - self.segment + 1))
            cleans.append(clean[..., start : start + self.segment])
            degradeds.append(degraded[..., start : start + self.segment])
        return torch.stack(cleans), torch.stack(degradeds)
