"""Conditioning and score networks.

Both are four-stage strided encoder/decoders with GRU bottlenecks.  The
decoder upsamples by ``rate_factors`` in order, so the encoder downsamples by
the reversed factors; with the default (2, 3, 5, 8) the conditioning decoder
produces feature maps at 1/240, 1/120, 1/40 and 1/8 of the sample rate, which
are injected into the matching score-network decoder stages through 1x1
projections.  The score network additionally receives the noise level at every
stage through a non-random Fourier embedding and FiLM, wraps itself in the
variance-preserving coefficients from ``diffusion``, and low-pass filters
around every rate change; the conditioning network keeps plain strided
convolutions.  All convolutional and linear weights use the weight-norm
parameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .audio_core import default_antialias_kernel
from .diffusion import precondition_coeffs
from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class ArchitectureConfig:
    rate_factors: tuple = (2, 3, 5, 8)  # decoder upsampling order
    base_channels: int = 48
    channel_growth: float = 2.0
    max_channels: int = 512
    gru_layers_cond: int = 2
    gru_layers_score: int = 1
    embedding_pairs: int = 128  # M cos/sin pairs -> embedding_dim = 2M
    kernel_rate: int = 5
    kernel_plain: int = 3
    antialias_stopband_db: float = 60.0
    sigma_data: float = 0.2

    def __post_init__(self):
        if len(self.rate_factors) != 4 or any(f < 1 for f in self.rate_factors):
            raise ConfigError(f"rate_factors must be 4 positive integers, got {self.rate_factors}")
        if self.base_channels < 1 or self.embedding_pairs < 1:
            raise ConfigError("base_channels and embedding_pairs must be positive")
        if self.kernel_rate % 2 == 0 or self.kernel_plain % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        object.__setattr__(self, "rate_factors", tuple(int(f) for f in self.rate_factors))

    @property
    def hop(self) -> int:
        return int(np.prod(self.rate_factors))

    @property
    def embedding_dim(self) -> int:
        return 2 * self.embedding_pairs

    def stage_channels(self) -> list:
        """Channel count after each encoder stage (deepest last)."""
        chans = []
        c = self.base_channels
        for _ in self.rate_factors:
            c = min(int(round(c * self.channel_growth)), self.max_channels)
            chans.append(c)
        return chans


@dataclass
class ConditioningFeatures:
    """Bottleneck features plus one map per decoder stage at increasing rates."""

    bottleneck: torch.Tensor  # (B, C, T/hop)
    stage_features: tuple  # 4 tensors, rates T/240, T/120, T/40, T/8 for default factors
    padded_length: int  # sample length the maps correspond to


@dataclass(frozen=True)
class FourierEmbeddingParams:
    alpha: float = 1.0
    beta_emb: float = 0.0
    num_pairs: int = 128


def fourier_embed(sigma, params: FourierEmbeddingParams):
    """Non-random Fourier embedding of the noise level:
    e = [cos(2 pi f m)]_{m<M} ++ [sin(2 pi f m)]_{m<M}, f = alpha*log(sigma) + beta."""
    sigma_t = torch.as_tensor(sigma, dtype=torch.get_default_dtype())
    if torch.any(sigma_t <= 0):
        raise InvalidInputError("fourier_embed requires sigma > 0")
    f = params.alpha * torch.log(sigma_t) + params.beta_emb
    m = torch.arange(params.num_pairs, dtype=f.dtype)
    angles = 2.0 * math.pi * f.reshape(-1, 1) * m
    emb = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)
    return emb.reshape(*sigma_t.shape, 2 * params.num_pairs) if sigma_t.dim() else emb.squeeze(0)


class FourierEmbedding(nn.Module):
    """Trainable (alpha, beta) variant used inside the score network."""

    def __init__(self, num_pairs: int):
        super().__init__()
        self.num_pairs = num_pairs
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.beta_emb = nn.Parameter(torch.tensor(0.0))

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        if torch.any(sigma <= 0):
            raise InvalidInputError("noise level must be positive")
        f = self.alpha * torch.log(sigma) + self.beta_emb
        m = torch.arange(self.num_pairs, dtype=f.dtype, device=f.device)
        angles = 2.0 * math.pi * f.unsqueeze(-1) * m
        return torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)


class FiLM(nn.Module):
    """Per-channel scale/shift computed from the noise embedding."""

    def __init__(self, embedding_dim: int, channels: int):
        super().__init__()
        self.proj = weight_norm(nn.Linear(embedding_dim, 2 * channels))

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(emb).chunk(2, dim=-1)
        return x * (1.0 + scale.unsqueeze(-1)) + shift.unsqueeze(-1)


def film_modulate(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Bare FiLM rule: out = scale * features + shift, broadcast over time."""
    return features * scale.unsqueeze(-1) + shift.unsqueeze(-1)


# ---------------------------------------------------------------------------
# Anti-aliased rate-change primitives
# ---------------------------------------------------------------------------

def _depthwise_lowpass(x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    channels = x.shape[1]
    pad = (taps.numel() - 1) // 2
    weight = taps.to(x.dtype).reshape(1, 1, -1).expand(channels, 1, -1)
    x = F.pad(x, (pad, pad), mode="replicate")
    return F.conv1d(x, weight, groups=channels)


def antialiased_down(x: torch.Tensor, factor: int, taps: torch.Tensor) -> torch.Tensor:
    """Per-channel lowpass at the new Nyquist, then stride-``factor`` decimation."""
    if factor == 1:
        return x
    return _depthwise_lowpass(x, taps)[..., ::factor]


def antialiased_up(x: torch.Tensor, factor: int, taps: torch.Tensor) -> torch.Tensor:
    """Zero-insertion upsampling followed by the same lowpass scaled by ``factor``."""
    if factor == 1:
        return x
    b, c, t = x.shape
    y = x.new_zeros(b, c, t * factor)
    y[..., ::factor] = x
    return _depthwise_lowpass(y, taps) * factor


def stage_lowpass_taps(factor: int, stopband_db: float) -> torch.Tensor:
    kernel = default_antialias_kernel(1.0 / (1.2 * factor), stopband_db)
    return torch.as_tensor(kernel.taps, dtype=torch.get_default_dtype())


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class ConvBlock(nn.Module):
    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.conv = weight_norm(nn.Conv1d(channels, channels, kernel, padding=kernel // 2))
        self.act = nn.PReLU(channels)

    def forward(self, x):
        return self.act(self.conv(x))


class RateChangeDown(nn.Module):
    """Strided convolution taking the rate down by ``factor``; optionally
    preceded by a fixed anti-alias lowpass (score network only)."""

    def __init__(self, c_in: int, c_out: int, factor: int, kernel: int, antialias_taps=None):
        super().__init__()
        self.factor = factor
        self.kernel = kernel
        self.conv = weight_norm(nn.Conv1d(c_in, c_out, kernel, stride=factor))
        self.act = nn.PReLU(c_out)
        if antialias_taps is None:
            self.lowpass_taps = None
        else:
            self.register_buffer("lowpass_taps", antialias_taps, persistent=False)

    def forward(self, x):
        if x.shape[-1] % self.factor:
            raise InvalidInputError(f"length {x.shape[-1]} not divisible by factor {self.factor}")
        if self.lowpass_taps is not None:
            x = _depthwise_lowpass(x, self.lowpass_taps)
        pad = max(self.kernel - self.factor, 0)
        x = F.pad(x, (pad // 2, pad - pad // 2))
        return self.act(self.conv(x))


class RateChangeUp(nn.Module):
    """Transposed convolution taking the rate up by ``factor``; optionally
    followed by the anti-alias lowpass scaled by the factor."""

    def __init__(self, c_in: int, c_out: int, factor: int, kernel: int, antialias_taps=None):
        super().__init__()
        self.factor = factor
        self.kernel = kernel
        out_pad = max(factor - kernel, 0)
        self.conv = weight_norm(
            nn.ConvTranspose1d(c_in, c_out, kernel, stride=factor, output_padding=out_pad)
        )
        self.act = nn.PReLU(c_out)
        if antialias_taps is None:
            self.lowpass_taps = None
        else:
            self.register_buffer("lowpass_taps", antialias_taps * factor, persistent=False)

    def forward(self, x):
        y = self.conv(x)
        excess = y.shape[-1] - x.shape[-1] * self.factor
        if excess:
            y = y[..., excess // 2 : excess // 2 + x.shape[-1] * self.factor]
        if self.lowpass_taps is not None:
            y = _depthwise_lowpass(y, self.lowpass_taps)
        return self.act(y)


class EncoderStage(nn.Module):
    """Three conv blocks, one of which changes rate."""

    def __init__(self, c_in, c_out, factor, cfg: ArchitectureConfig, antialias_taps=None):
        super().__init__()
        self.blocks = nn.Sequential(
            ConvBlock(c_in, cfg.kernel_plain), ConvBlock(c_in, cfg.kernel_plain)
        )
        self.down = RateChangeDown(c_in, c_out, factor, cfg.kernel_rate, antialias_taps)

    def forward(self, x):
        return self.down(self.blocks(x))


class DecoderStage(nn.Module):
    """Two plain blocks producing the stage's feature map, then the upsampler."""

    def __init__(self, c_in, c_out, factor, cfg: ArchitectureConfig, antialias_taps=None):
        super().__init__()
        self.blocks = nn.Sequential(
            ConvBlock(c_in, cfg.kernel_plain), ConvBlock(c_in, cfg.kernel_plain)
        )
        self.up = RateChangeUp(c_in, c_out, factor, cfg.kernel_rate, antialias_taps)

    def forward(self, x):
        g = self.blocks(x)
        return g, self.up(g)


def _pad_to_hop(x: torch.Tensor, hop: int) -> torch.Tensor:
    remainder = x.shape[-1] % hop
    if remainder:
        x = F.pad(x, (0, hop - remainder))
    return x


# ---------------------------------------------------------------------------
# Conditioning network
# ---------------------------------------------------------------------------

class ConditioningNetwork(nn.Module):
    """Maps degraded speech to clean-speech features plus a full-rate waveform
    head; the head output is the target of the adversarial and mel losses."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels()
        enc_factors = tuple(reversed(cfg.rate_factors))
        self.init_conv = weight_norm(nn.Conv1d(1, cfg.base_channels, cfg.kernel_plain, padding=cfg.kernel_plain // 2))
        self.init_act = nn.PReLU(cfg.base_channels)

        enc_in = [cfg.base_channels] + chans[:-1]
        self.encoder = nn.ModuleList(
            EncoderStage(enc_in[i], chans[i], enc_factors[i], cfg) for i in range(4)
        )
        # Adaptation layers: 1x1 conv + average pooling taking each encoder
        # stage output down to the bottleneck rate, summed into the bottleneck.
        self.adapt = nn.ModuleList(
            weight_norm(nn.Conv1d(chans[i], chans[-1], 1)) for i in range(3)
        )
        self.adapt_pool = [int(np.prod(enc_factors[i + 1 :])) for i in range(3)]

        self.gru = nn.GRU(chans[-1], chans[-1], num_layers=cfg.gru_layers_cond, batch_first=True)

        dec_out = [chans[2], chans[1], chans[0], cfg.base_channels]
        dec_in = [chans[-1]] + dec_out[:-1]
        self.decoder = nn.ModuleList(
            DecoderStage(dec_in[i], dec_out[i], cfg.rate_factors[i], cfg) for i in range(4)
        )
        self.final_block = ConvBlock(cfg.base_channels, cfg.kernel_plain)
        self.head = weight_norm(nn.Conv1d(cfg.base_channels, 1, cfg.kernel_plain, padding=cfg.kernel_plain // 2))

    def forward(self, y: torch.Tensor):
        """y: (B, 1, T) -> (ConditioningFeatures, head waveform (B, 1, T))."""
        if y.dim() != 3 or y.shape[1] != 1:
            raise InvalidInputError(f"expected (B, 1, T) waveform, got {tuple(y.shape)}")
        length = y.shape[-1]
        x = _pad_to_hop(y, self.cfg.hop)
        padded = x.shape[-1]

        h = self.init_act(self.init_conv(x))
        enc_outs = []
        for stage in self.encoder:
            h = stage(h)
            enc_outs.append(h)

        bneck = enc_outs[-1]
        for i, adapt in enumerate(self.adapt):
            pooled = F.avg_pool1d(enc_outs[i], self.adapt_pool[i])
            bneck = bneck + adapt(pooled)
        bneck, _ = self.gru(bneck.transpose(1, 2))
        bneck = bneck.transpose(1, 2)

        h = bneck
        stage_features = []
        for stage in self.decoder:
            g, h = stage(h)
            stage_features.append(g)
        h = self.final_block(h)
        wave = self.head(h)[..., :length]
        feats = ConditioningFeatures(
            bottleneck=bneck, stage_features=tuple(stage_features), padded_length=padded
        )
        return feats, wave

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Score network
# ---------------------------------------------------------------------------

class ScoreNetwork(nn.Module):
    """Noise-conditional UNet over waveforms. The raw network output is
    wrapped as a denoised estimate D(x) = c_skip*x + c_out*S'(c_in*x, c,
    sigma), and the forward pass returns its score (D(x) - x)/sigma^2, which
    the sampler and the training objective consume directly. The wrapping
    keeps the raw network's inputs and regression targets unit-variance at
    every noise level."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels()
        enc_factors = tuple(reversed(cfg.rate_factors))
        self.embedding = FourierEmbedding(cfg.embedding_pairs)
        edim = cfg.embedding_dim

        taps = {f: stage_lowpass_taps(f, cfg.antialias_stopband_db) for f in set(cfg.rate_factors)}

        self.init_conv = weight_norm(nn.Conv1d(1, cfg.base_channels, cfg.kernel_plain, padding=cfg.kernel_plain // 2))
        self.init_act = nn.PReLU(cfg.base_channels)

        enc_in = [cfg.base_channels] + chans[:-1]
        self.encoder = nn.ModuleList(
            EncoderStage(enc_in[i], chans[i], enc_factors[i], cfg, taps[enc_factors[i]])
            for i in range(4)
        )
        self.enc_film = nn.ModuleList(FiLM(edim, enc_in[i]) for i in range(4))

        self.gru = nn.GRU(chans[-1], chans[-1], num_layers=cfg.gru_layers_score, batch_first=True)
        self.bneck_film = FiLM(edim, chans[-1])

        dec_out = [chans[2], chans[1], chans[0], cfg.base_channels]
        dec_in = [chans[-1]] + dec_out[:-1]
        self.decoder = nn.ModuleList(
            DecoderStage(dec_in[i], dec_out[i], cfg.rate_factors[i], cfg, taps[cfg.rate_factors[i]])
            for i in range(4)
        )
        self.dec_film = nn.ModuleList(FiLM(edim, dec_in[i]) for i in range(4))
        # 1x1 projections of the conditioning decoder's stage features.
        self.cond_proj = nn.ModuleList(
            weight_norm(nn.Conv1d(dec_in[i], dec_in[i], 1)) for i in range(4)
        )
        self.final_block = ConvBlock(cfg.base_channels, cfg.kernel_plain)
        self.out_conv = weight_norm(nn.Conv1d(cfg.base_channels, 1, cfg.kernel_plain, padding=cfg.kernel_plain // 2))

    def _check_cond(self, cond: ConditioningFeatures, padded: int, batch: int):
        expect = [padded // self.cfg.hop]
        for f in self.cfg.rate_factors[:-1]:
            expect.append(expect[-1] * f)
        if cond.padded_length != padded:
            raise InvalidInputError(
                f"conditioning features computed for length {cond.padded_length}, input pads to {padded}"
            )
        for i, feat in enumerate(cond.stage_features):
            if feat.shape[0] != batch or feat.shape[-1] != expect[i]:
                raise InvalidInputError(
                    f"stage feature {i} has shape {tuple(feat.shape)}, expected (B={batch}, C, {expect[i]})"
                )

    def forward(self, x: torch.Tensor, cond: ConditioningFeatures, sigma) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != 1:
            raise InvalidInputError(f"expected (B, 1, T) waveform, got {tuple(x.shape)}")
        length = x.shape[-1]
        xp = _pad_to_hop(x, self.cfg.hop)
        self._check_cond(cond, xp.shape[-1], xp.shape[0])

        sigma_t = torch.as_tensor(sigma, dtype=xp.dtype, device=xp.device)
        if sigma_t.dim() == 0:
            sigma_t = sigma_t.expand(xp.shape[0])
        _, _, c_in = precondition_coeffs(sigma_t, self.cfg.sigma_data)
        shape = (-1, 1, 1)
        emb = self.embedding(sigma_t)

        h = self.init_act(self.init_conv(xp * c_in.reshape(shape)))
        skips = [h]
        for i, stage in enumerate(self.encoder):
            h = stage(self.enc_film[i](h, emb))
            skips.append(h)
        skips = skips[:-1]  # deepest output feeds the bottleneck directly

        h = self.bneck_film(h, emb)
        h, _ = self.gru(h.transpose(1, 2))
        h = h.transpose(1, 2)

        for i, stage in enumerate(self.decoder):
            h = h + self.cond_proj[i](cond.stage_features[i])
            h = self.dec_film[i](h, emb)
            _, h = stage(h)
            h = h + skips[3 - i]
        h = self.final_block(h)
        raw = self.out_conv(h)
        # score of the denoised estimate, (c_skip*x + c_out*raw - x)/sigma^2,
        # with the coefficients expanded so tiny sigmas stay well conditioned:
        # (c_skip - 1)/sigma^2 = -1/(sigma_d^2 + sigma^2) and
        # c_out/sigma^2 = sigma_d/(sigma*sqrt(sigma_d^2 + sigma^2))
        sig = sigma_t.reshape(shape)
        total = sig * sig + self.cfg.sigma_data**2
        score = raw * (self.cfg.sigma_data / (sig * torch.sqrt(total))) - xp / total
        return score[..., :length]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class EnhancementModel:
    """The pair of networks the sampler drives."""

    cond_net: ConditioningNetwork
    score_net: ScoreNetwork

    def condition(self, y: torch.Tensor):
        return self.cond_net(y)

    def score(self, x: torch.Tensor, cond: ConditioningFeatures, sigma) -> torch.Tensor:
        return self.score_net(x, cond, sigma)

    def parameter_count(self) -> int:
        return self.cond_net.parameter_count() + self.score_net.parameter_count()


def build_model(cfg: ArchitectureConfig) -> EnhancementModel:
    return EnhancementModel(cond_net=ConditioningNetwork(cfg), score_net=ScoreNetwork(cfg))
