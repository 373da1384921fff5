"""Low-rank adaptation fine-tuning: adapter injection/merge, a native CTC
loss, a deterministic template phoneme predictor, and the fine-tune step that
backpropagates through the tail of the sampling chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .adversarial import DiscriminatorBank, LossWeights, generator_feature_loss
from .diffusion import SamplerConfig, enhance_waveform
from .errors import ConfigError, InvalidInputError
from .torchdsp import mel_basis, magnitude_spectrogram, multi_resolution_spectrogram_loss

log = logging.getLogger(__name__)

NEG_INF = float("-inf")
# finite stand-in for log 0 inside the DP: exp() underflows to exactly zero,
# so impossible paths contribute nothing, but logsumexp backward stays finite
LOG_ZERO = -1e30


# ---------------------------------------------------------------------------
# LoRA wrappers
# ---------------------------------------------------------------------------

class LoRALayer(nn.Module):
    """Wraps a frozen base layer; adds scaling * B @ A with B zero-initialized,
    so a fresh adapter leaves the forward pass bit-identical."""

    def __init__(self, base: nn.Module, in_features: int, out_features: int, rank: int, scaling: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = scaling
        self.lora_a = nn.Parameter(torch.randn(rank, in_features) * (1.0 / math.sqrt(in_features)))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_b @ self.lora_a)

    def forward(self, x):
        raise NotImplementedError


class LoRALinear(LoRALayer):
    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__(base, base.in_features, base.out_features, rank, scaling)

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scaling


class LoRAConv1x1(LoRALayer):
    def __init__(self, base: nn.Conv1d, rank: int, scaling: float):
        super().__init__(base, base.in_channels, base.out_channels, rank, scaling)

    def forward(self, x):
        delta = F.conv1d(F.conv1d(x, self.lora_a.unsqueeze(-1)), self.lora_b.unsqueeze(-1))
        return self.base(x) + delta * self.scaling


@dataclass
class LoRAAdapter:
    """Registry of adapted layers for one module tree."""

    rank: int
    scaling: float
    layers: dict = field(default_factory=dict)  # name -> (in_features, out_features)

    @property
    def parameter_count(self) -> int:
        return sum(self.rank * (i + o) for i, o in self.layers.values())


def _eligible(module: nn.Module):
    """(in, out) for adaptable layers: Linear and 1x1 Conv1d."""
    if isinstance(module, LoRALayer):
        return None
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    if isinstance(module, nn.Conv1d) and module.kernel_size == (1,) and module.groups == 1:
        return module.in_channels, module.out_channels
    return None


def _set_by_path(root: nn.Module, path: str, value: nn.Module):
    parts = path.split(".")
    parent = root
    for p in parts[:-1]:
        parent = parent[int(p)] if p.isdigit() and not hasattr(parent, p) else getattr(parent, p)
    last = parts[-1]
    if last.isdigit() and not hasattr(parent, last):
        parent[int(last)] = value
    else:
        setattr(parent, last, value)


def inject_lora(model: nn.Module, rank: int = 16, min_dim: int | None = None):
    """Wrap every eligible layer with a rank-``rank`` adapter (scaling 1/rank).

    Layers whose smaller dimension is below ``min_dim`` (default: the rank)
    are left untouched.  Returns (model, LoRAAdapter registry); the base
    weights are frozen."""
    if rank <= 0:
        raise ConfigError(f"LoRA rank must be positive, got {rank}")
    min_dim = rank if min_dim is None else min_dim
    scaling = 1.0 / rank
    adapter = LoRAAdapter(rank=rank, scaling=scaling)
    targets = []
    for name, module in model.named_modules():
        dims = _eligible(module)
        if dims is None or min(dims) < min_dim:
            continue
        targets.append((name, module, dims))
    for name, module, (fan_in, fan_out) in targets:
        wrapper_cls = LoRALinear if isinstance(module, nn.Linear) else LoRAConv1x1
        _set_by_path(model, name, wrapper_cls(module, rank, scaling))
        adapter.layers[name] = (fan_in, fan_out)
    for p in model.parameters():
        p.requires_grad_(False)
    for module in model.modules():
        if isinstance(module, LoRALayer):
            module.lora_a.requires_grad_(True)
            module.lora_b.requires_grad_(True)
    return model, adapter


def adapter_parameters(model: nn.Module):
    for module in model.modules():
        if isinstance(module, LoRALayer):
            yield module.lora_a
            yield module.lora_b


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold scaling * B @ A into each base weight and drop the wrappers.

    Weight-norm parameterizations on the base are removed first (the fold
    changes the effective weight, which the (g, v) form cannot absorb exactly).
    Raises if the model holds no adapters (guards double merges)."""
    wrapped = [(n, m) for n, m in model.named_modules() if isinstance(m, LoRALayer)]
    if not wrapped:
        raise InvalidInputError("merge_lora: model has no adapters (already merged?)")
    for name, module in wrapped:
        base = module.base
        if parametrize.is_parametrized(base, "weight"):
            parametrize.remove_parametrizations(base, "weight")
        with torch.no_grad():
            delta = module.delta_weight()
            if isinstance(base, nn.Conv1d):
                delta = delta.unsqueeze(-1)
            base.weight += delta.to(base.weight.dtype)
        _set_by_path(model, name, base)
    return model


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_log_likelihood(log_probs: torch.Tensor, targets, blank: int = 0) -> torch.Tensor:
    """Log-likelihood of a label sequence under per-frame log-probabilities
    (T, A), summing over all monotonic alignments via the standard
    blank-interleaved forward recursion in the log domain."""
    if log_probs.dim() != 2:
        raise InvalidInputError(f"log_probs must be (frames, alphabet), got {tuple(log_probs.shape)}")
    targets = [int(t) for t in targets]
    n_frames, alphabet = log_probs.shape
    if any(t == blank or not 0 <= t < alphabet for t in targets):
        raise InvalidInputError("targets must be non-blank symbols inside the alphabet")
    if not targets:
        return log_probs[:, blank].sum()
    # adjacent repeats force a separating blank, so they cost an extra frame
    needed = len(targets) + sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if n_frames < needed:
        return log_probs.new_tensor(NEG_INF)
    ext = [blank]
    for t in targets:
        ext += [t, blank]
    s = len(ext)
    ext_idx = torch.tensor(ext, dtype=torch.long, device=log_probs.device)
    # skip[s] = 1 where the alignment may jump from s-2 (label change, no blank)
    skip = torch.zeros(s, dtype=torch.bool)
    for i in range(2, s):
        skip[i] = ext[i] != blank and ext[i] != ext[i - 2]

    alpha = log_probs.new_full((s,), LOG_ZERO)
    alpha[0] = log_probs[0, blank]
    if s > 1:
        alpha[1] = log_probs[0, ext[1]]
    for frame in range(1, n_frames):
        stay = alpha
        step = torch.cat([alpha.new_full((1,), LOG_ZERO), alpha[:-1]])
        jump = torch.cat([alpha.new_full((2,), LOG_ZERO), alpha[:-2]])
        jump = torch.where(skip, jump, jump.new_full((), LOG_ZERO))
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + log_probs[frame, ext_idx]
    return torch.logsumexp(alpha[-2:], dim=0)


def greedy_decode(log_probs: torch.Tensor, blank: int = 0):
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    path = torch.argmax(log_probs, dim=-1).tolist()
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


# ---------------------------------------------------------------------------
# Deterministic phoneme predictor
# ---------------------------------------------------------------------------

class TemplatePhonemePredictor:
    """Frozen, differentiable pseudo-phoneme classifier over log-mel frames.

    Each symbol owns a fixed unit-norm spectral-shape template (cosine basis
    patterns); a frame's logit is the negative squared distance between its
    normalized log-mel vector and the template, divided by the temperature.
    Blank owns the zero template, so flat/silent frames decode to blank.
    Satisfies the predictor contract: rows of log_probs are log-distributions,
    nothing here is ever trained.
    """

    def __init__(self, sample_rate: int, num_phones: int = 6, mel_bins: int = 32, fft_size: int = 512, hop: int = 160, temperature: float = 0.05):
        self.sample_rate = sample_rate
        self.mel_bins = mel_bins
        self.fft_size = fft_size
        self.hop = hop
        self.temperature = temperature
        self.alphabet = ("<blank>",) + tuple(f"ph{i}" for i in range(1, num_phones + 1))
        m = torch.arange(mel_bins, dtype=torch.float64)
        rows = [torch.zeros(mel_bins, dtype=torch.float64)]
        for p in range(1, num_phones + 1):
            pattern = torch.cos(math.pi * p * (m + 0.5) / mel_bins)
            rows.append(pattern / pattern.norm())
        self.templates = torch.stack(rows)  # (A, mel_bins)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def log_probs(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, 1, T) or (T,) waveform -> (B, frames, alphabet) log-probabilities."""
        if wave.dim() == 1:
            wave = wave.reshape(1, 1, -1)
        mag = magnitude_spectrogram(wave, self.fft_size, self.hop, self.fft_size)
        fb = mel_basis(self.sample_rate, self.fft_size, self.mel_bins, mag.dtype, mag.device)
        logmel = torch.log10(torch.clamp(torch.matmul(fb, mag), min=1e-5))  # (B, M, frames)
        x = logmel.transpose(1, 2)  # (B, frames, M)
        x = x - x.mean(dim=-1, keepdim=True)
        x = x / (x.norm(dim=-1, keepdim=True) + 1e-3)
        tpl = self.templates.to(x.dtype).to(x.device)
        dist_sq = torch.cdist(x, tpl.unsqueeze(0).expand(x.shape[0], -1, -1)) ** 2
        return F.log_softmax(-dist_sq / self.temperature, dim=-1)


def ctc_phoneme_loss(enhanced: torch.Tensor, clean: torch.Tensor, predictor) -> torch.Tensor:
    """CTC negative log-likelihood of the clean utterance's greedy-decoded
    phoneme sequence under the enhanced utterance's predictions.  Gradients
    flow only through ``enhanced``; an empty decoded target contributes 0."""
    if enhanced.shape != clean.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(clean.shape)}")
    if enhanced.dim() == 1:
        enhanced = enhanced.reshape(1, 1, -1)
        clean = clean.reshape(1, 1, -1)
    with torch.no_grad():
        clean_lp = predictor.log_probs(clean)
    enh_lp = predictor.log_probs(enhanced)
    total = enhanced.new_zeros(())
    for b in range(enhanced.shape[0]):
        target = greedy_decode(clean_lp[b])
        if not target:
            log.warning("ctc_phoneme_loss: empty decoded target (silent clean segment?); contributing 0")
            continue
        total = total - ctc_log_likelihood(enh_lp[b], target)
    return total / enhanced.shape[0]


# ---------------------------------------------------------------------------
# Fine-tune step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneWeights:
    ctc: float = 1.0
    spec: float = 1.0
    gan: LossWeights = field(default_factory=LossWeights)


def finetune_step(batch_degraded: torch.Tensor, batch_clean: torch.Tensor, model, discriminators: DiscriminatorBank, predictor, sampler_cfg: SamplerConfig, weights: FinetuneWeights, optimizer: torch.optim.Optimizer, generator: torch.Generator, sample_rate: int, grad_clip: float = 10.0, spec_resolutions=((1024, 256), (2048, 512), (512, 128))):
    """One adapter update: sample with gradients through the last two steps,
    combine the phoneme-fidelity loss with the frozen integrity losses, and
    step only the adapter parameters.  Non-finite gradients skip the step."""
    enhanced, cond, head = enhance_waveform(
        batch_degraded, model, sampler_cfg, generator, last_steps_with_grad=2
    )
    ctc = ctc_phoneme_loss(enhanced, batch_clean, predictor)
    gan = generator_feature_loss(batch_clean, head, discriminators, weights.gan, sample_rate)
    spec = multi_resolution_spectrogram_loss(enhanced, batch_clean, spec_resolutions)
    total = weights.ctc * ctc + gan["total"] + weights.spec * spec

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for group in optimizer.param_groups for p in group["params"]]
    finite = all(p.grad is None or torch.all(torch.isfinite(p.grad)) for p in params)
    record = {
        "ctc": float(ctc.detach()),
        "gan_total": float(gan["total"].detach()),
        "spec": float(spec.detach()),
        "total": float(total.detach()),
        "skipped": not finite,
    }
    if finite:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
        optimizer.step()
    else:
        log.warning("finetune_step: non-finite gradients; skipping update")
    return record
