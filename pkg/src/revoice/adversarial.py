"""Multi-period and multi-resolution discriminators with LSGAN, feature
matching and mel losses, applied to the conditioning network's waveform head;
plus the mixture-density heads that replace them in the ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .errors import InvalidInputError
from .torchdsp import LOG_MEL_FLOOR, log_mel_magnitude, magnitude_spectrogram


@dataclass(frozen=True)
class DiscriminatorConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    resolutions: tuple = ((1024, 256), (2048, 512), (512, 128))
    mpd_channels: tuple = (32, 128, 512, 1024)
    mrd_channels: int = 32
    lrelu_slope: float = 0.1


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    fm: float = 2.0
    mel: float = 45.0


class PeriodDiscriminator(nn.Module):
    """Folds the waveform into (frames, period) and stacks (5, 1) convolutions
    striding over frames only."""

    def __init__(self, period: int, cfg: DiscriminatorConfig):
        super().__init__()
        self.period = period
        self.slope = cfg.lrelu_slope
        chans = [1, *cfg.mpd_channels]
        self.convs = nn.ModuleList(
            weight_norm(nn.Conv2d(chans[i], chans[i + 1], (5, 1), stride=(3, 1), padding=(2, 0)))
            for i in range(len(chans) - 1)
        )
        self.convs.append(weight_norm(nn.Conv2d(chans[-1], chans[-1], (5, 1), padding=(2, 0))))
        self.out = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0)))

    def forward(self, x: torch.Tensor):
        b, c, t = x.shape
        if t % self.period:
            x = F.pad(x, (0, self.period - t % self.period), mode="reflect")
            t = x.shape[-1]
        x = x.view(b, c, t // self.period, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
            feats.append(x)
        score = self.out(x)
        feats.append(score)
        return score, feats


class ResolutionDiscriminator(nn.Module):
    """Operates on the linear magnitude spectrogram of one STFT resolution."""

    def __init__(self, fft_size: int, hop: int, cfg: DiscriminatorConfig):
        super().__init__()
        self.fft_size = fft_size
        self.hop = hop
        self.slope = cfg.lrelu_slope
        c = cfg.mrd_channels
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(1, c, (3, 9), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
            ]
        )
        self.out = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def forward(self, x: torch.Tensor):
        mag = magnitude_spectrogram(x, self.fft_size, self.hop).unsqueeze(1)
        feats = []
        h = mag
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.slope)
            feats.append(h)
        score = self.out(h)
        feats.append(score)
        return score, feats


class DiscriminatorBank(nn.Module):
    """All sub-discriminators; forward returns [(score, feature maps), ...]."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        subs = [PeriodDiscriminator(p, cfg) for p in cfg.periods]
        subs += [ResolutionDiscriminator(fft, hop, cfg) for fft, hop in cfg.resolutions]
        self.subs = nn.ModuleList(subs)

    def forward(self, x: torch.Tensor):
        return [sub(x) for sub in self.subs]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def lsgan_losses(real_scores, fake_scores):
    """(d_loss, g_loss) summed over sub-discriminators.

    d_loss drives D(real) to 1 and D(fake) to 0; g_loss drives D(fake) to 1.
    """
    if len(real_scores) != len(fake_scores):
        raise InvalidInputError("real/fake score lists differ in length")
    d_loss = sum(torch.mean((r - 1.0) ** 2) + torch.mean(f**2) for r, f in zip(real_scores, fake_scores))
    g_loss = sum(torch.mean((f - 1.0) ** 2) for f in fake_scores)
    return d_loss, g_loss


def feature_matching_loss(real_feats, fake_feats):
    """Mean absolute difference averaged over layers and sub-discriminators.
    Real-branch features are treated as constants."""
    if len(real_feats) != len(fake_feats):
        raise InvalidInputError("feature lists differ in sub-discriminator count")
    terms = []
    for reals, fakes in zip(real_feats, fake_feats):
        if len(reals) != len(fakes):
            raise InvalidInputError("feature lists differ in layer count")
        for r, f in zip(reals, fakes):
            if r.shape != f.shape:
                raise InvalidInputError(f"feature shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}")
            terms.append(torch.mean(torch.abs(r.detach() - f)))
    return torch.stack(terms).mean()


def mel_loss(reference: torch.Tensor, estimate: torch.Tensor, sample_rate: int, fft_size: int = 1024, hop: int = 256, mel_bins: int = 80) -> torch.Tensor:
    """Mean absolute log10 mel-magnitude difference (floor 1e-5); scaling one
    argument by 10 shifts the value by exactly 1."""
    if reference.shape != estimate.shape:
        raise InvalidInputError(f"length mismatch: {tuple(reference.shape)} vs {tuple(estimate.shape)}")
    ref = log_mel_magnitude(reference, sample_rate, fft_size, hop, mel_bins)
    est = log_mel_magnitude(estimate, sample_rate, fft_size, hop, mel_bins)
    return torch.mean(torch.abs(ref - est))


def generator_feature_loss(clean: torch.Tensor, head_output: torch.Tensor, discriminators: DiscriminatorBank, weights: LossWeights, sample_rate: int):
    """Itemized adversarial-side generator loss on the waveform head."""
    real = discriminators(clean)
    fake = discriminators(head_output)
    _, g = lsgan_losses([r[0] for r in real], [f[0] for f in fake])
    fm = feature_matching_loss([r[1] for r in real], [f[1] for f in fake])
    mel = mel_loss(clean, head_output, sample_rate)
    total = weights.adv * g + weights.fm * fm + weights.mel * mel
    return {"adv": g, "fm": fm, "mel": mel, "total": total}


# ---------------------------------------------------------------------------
# Mixture-density heads (ablation arm)
# ---------------------------------------------------------------------------

@dataclass
class MDNParams:
    """Per-frame diagonal Gaussian mixture: log-weights on the simplex, means
    and log-variances of shape (B, T, K, D)."""

    log_weights: torch.Tensor  # (B, T, K)
    means: torch.Tensor  # (B, T, K, D)
    log_vars: torch.Tensor  # (B, T, K, D)

    def __post_init__(self):
        norm = torch.logsumexp(self.log_weights, dim=-1)
        if not torch.allclose(norm, torch.zeros_like(norm), atol=1e-5):
            raise InvalidInputError("mixture weights must sum to 1 per frame")
        if self.means.shape != self.log_vars.shape:
            raise InvalidInputError("means and log_vars must share a shape")


LOG_2PI = 1.8378770664093453


def mdn_loss(params: MDNParams, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of targets (B, T, D) under the mixture."""
    if targets.shape[-1] != params.means.shape[-1]:
        raise InvalidInputError(
            f"target dim {targets.shape[-1]} != mixture dim {params.means.shape[-1]}"
        )
    x = targets.unsqueeze(-2)  # (B, T, 1, D)
    inv_var = torch.exp(-params.log_vars)
    comp = -0.5 * torch.sum((x - params.means) ** 2 * inv_var + params.log_vars + LOG_2PI, dim=-1)
    log_prob = torch.logsumexp(params.log_weights + comp, dim=-1)
    return -torch.mean(log_prob)


class MDNMelHead(nn.Module):
    """Predicts a K-component mixture over log-mel frames from the bottleneck."""

    def __init__(self, c_in: int, mel_bins: int = 80, components: int = 3):
        super().__init__()
        self.mel_bins = mel_bins
        self.components = components
        self.proj = weight_norm(nn.Conv1d(c_in, components * (1 + 2 * mel_bins), 1))

    def forward(self, bottleneck: torch.Tensor) -> MDNParams:
        b, _, t = bottleneck.shape
        k, d = self.components, self.mel_bins
        out = self.proj(bottleneck).transpose(1, 2)  # (B, T, K*(1+2D))
        logits = out[..., :k]
        means = out[..., k : k + k * d].reshape(b, t, k, d)
        log_vars = out[..., k + k * d :].reshape(b, t, k, d).clamp(-14.0, 14.0)
        return MDNParams(F.log_softmax(logits, dim=-1), means, log_vars)


class MDNWaveHead(nn.Module):
    """Single-component per-sample Gaussian: the waveform head output is the
    mean; a small convolution predicts the log-variance track."""

    def __init__(self, kernel: int = 9):
        super().__init__()
        self.log_var_conv = weight_norm(nn.Conv1d(1, 1, kernel, padding=kernel // 2))

    def forward(self, head_output: torch.Tensor) -> MDNParams:
        means = head_output.transpose(1, 2).unsqueeze(-2)  # (B, T, 1, 1)
        log_vars = self.log_var_conv(head_output).transpose(1, 2).unsqueeze(-2).clamp(-14.0, 14.0)
        log_weights = torch.zeros_like(means[..., 0])
        return MDNParams(log_weights, means, log_vars)


def mdn_generator_losses(clean: torch.Tensor, head_output: torch.Tensor, bottleneck: torch.Tensor, mel_head: MDNMelHead, wave_head: MDNWaveHead, sample_rate: int, hop: int):
    """Ablation-arm generator losses: the bottleneck is matched to the clean
    log-mel at the bottleneck frame rate and the head to the clean waveform."""
    mel_target = log_mel_magnitude(
        clean, sample_rate, fft_size=1024, hop=hop, mel_bins=mel_head.mel_bins
    ).transpose(1, 2)
    params = mel_head(bottleneck)
    frames = min(mel_target.shape[1], params.means.shape[1])
    params = MDNParams(
        params.log_weights[:, :frames], params.means[:, :frames], params.log_vars[:, :frames]
    )
    nll_mel = mdn_loss(params, mel_target[:, :frames])
    wave_params = wave_head(head_output)
    nll_wave = mdn_loss(wave_params, clean.transpose(1, 2))
    total = nll_mel + nll_wave
    return {"mdn_mel": nll_mel, "mdn_wave": nll_wave, "total": total}
