"""Differentiable spectral helpers shared by losses and discriminators.

Mirrors the numpy analysis conventions of ``audio_core`` where it matters
(mel filterbank construction is reused verbatim); framing here follows
``torch.stft`` since these paths only feed losses, never reconstruction.
"""

from __future__ import annotations

import torch

from .audio_core import mel_filterbank

_WINDOW_CACHE: dict = {}
_MEL_CACHE: dict = {}

LOG_MEL_FLOOR = 1e-5


def _hann(win_length: int, dtype, device) -> torch.Tensor:
    key = (win_length, dtype, device)
    if key not in _WINDOW_CACHE:
        _WINDOW_CACHE[key] = torch.hann_window(win_length, periodic=True, dtype=dtype, device=device)
    return _WINDOW_CACHE[key]


def magnitude_spectrogram(x: torch.Tensor, fft_size: int, hop: int, win_length: int | None = None) -> torch.Tensor:
    """|STFT| of shape (B, fft_size // 2 + 1, frames); x is (B, T) or (B, 1, T)."""
    if x.dim() == 3:
        x = x.squeeze(1)
    win_length = win_length or fft_size
    window = _hann(win_length, x.dtype, x.device)
    spec = torch.stft(
        x,
        n_fft=fft_size,
        hop_length=hop,
        win_length=win_length,
        window=window,
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.abs()


def mel_basis(sample_rate: int, fft_size: int, mel_bins: int, dtype, device) -> torch.Tensor:
    key = (sample_rate, fft_size, mel_bins, dtype, device)
    if key not in _MEL_CACHE:
        fb = mel_filterbank(sample_rate, fft_size, mel_bins, 0.0, sample_rate / 2.0)
        _MEL_CACHE[key] = torch.as_tensor(fb, dtype=dtype, device=device)
    return _MEL_CACHE[key]


def mel_magnitude(x: torch.Tensor, sample_rate: int, fft_size: int = 1024, hop: int = 256, mel_bins: int = 80) -> torch.Tensor:
    """Mel-weighted magnitude spectrogram (filterbank applied to |STFT|)."""
    mag = magnitude_spectrogram(x, fft_size, hop)
    fb = mel_basis(sample_rate, fft_size, mel_bins, mag.dtype, mag.device)
    return torch.matmul(fb, mag)


def log_mel_magnitude(x: torch.Tensor, sample_rate: int, fft_size: int = 1024, hop: int = 256, mel_bins: int = 80) -> torch.Tensor:
    return torch.log10(torch.clamp(mel_magnitude(x, sample_rate, fft_size, hop, mel_bins), min=LOG_MEL_FLOOR))


def multi_resolution_spectrogram_loss(estimate: torch.Tensor, reference: torch.Tensor, resolutions) -> torch.Tensor:
    """Sum over resolutions of L1 log-magnitude distance plus spectral
    convergence; the standard integrity loss for waveform generators."""
    total = estimate.new_zeros(())
    for fft_size, hop in resolutions:
        mag_e = magnitude_spectrogram(estimate, fft_size, hop)
        mag_r = magnitude_spectrogram(reference, fft_size, hop)
        log_l1 = torch.mean(torch.abs(torch.log(mag_r.clamp(min=LOG_MEL_FLOOR)) - torch.log(mag_e.clamp(min=LOG_MEL_FLOOR))))
        sc = torch.linalg.norm(mag_r - mag_e) / torch.linalg.norm(mag_r).clamp(min=1e-12)
        total = total + log_l1 + sc
    return total
