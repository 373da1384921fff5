"""Waveform container, spectral transforms, FIR design, resampling and the LSD metric.

Everything here is a pure function over immutable inputs; all other modules
build on these primitives.  Internals run in float64 regardless of the dtype
of the incoming samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import ConfigError, FilterDesignError, InvalidInputError

# Floor added to power spectra before taking logs (LSD and friends).
POWER_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform: sample values (nominal range [-1, 1]) plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("samples contain NaN or Inf")
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise InvalidInputError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def with_samples(self, samples: np.ndarray) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class SpectralConfig:
    """STFT/mel analysis settings. Defaults follow common vocoder practice."""

    window_length: int = 1024
    hop_length: int = 256
    fft_size: int = 1024
    window: str = "hann"
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist of the analyzed buffer
    center: bool = True

    def __post_init__(self):
        if not (0 < self.hop_length <= self.window_length <= self.fft_size):
            raise ConfigError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length})"
                f" <= fft ({self.fft_size})"
            )
        if self.mel_bins < 1:
            raise ConfigError("mel_bins must be positive")
        if self.fmin < 0:
            raise ConfigError("fmin must be >= 0")
        if self.fmax is not None and not self.fmin < self.fmax:
            raise ConfigError(f"need fmin < fmax, got {self.fmin} >= {self.fmax}")

    def resolve_fmax(self, sample_rate: int) -> float:
        nyquist = sample_rate / 2.0
        fmax = nyquist if self.fmax is None else float(self.fmax)
        if not (self.fmin < fmax <= nyquist):
            raise ConfigError(f"need fmin < fmax <= Nyquist, got fmin={self.fmin}, fmax={fmax}, sr={sample_rate}")
        return fmax


@dataclass(frozen=True)
class FilterKernel:
    """Linear-phase FIR low-pass: symmetric taps, unit DC gain."""

    taps: np.ndarray
    cutoff_norm: float  # passband edge as fraction of Nyquist
    stopband_attenuation_db: float

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 1 or taps.size % 2 == 0:
            raise ConfigError("taps must be a 1-D odd-length sequence")
        if not np.allclose(taps, taps[::-1], atol=1e-12, rtol=0):
            raise ConfigError("taps must be symmetric (linear phase)")
        if abs(taps.sum() - 1.0) > 1e-6:
            raise ConfigError(f"DC gain must be 1 within 1e-6, got {taps.sum():.8f}")
        if not (0.0 < self.cutoff_norm < 1.0):
            raise ConfigError("cutoff_norm must lie in (0, 1)")

    @property
    def num_taps(self) -> int:
        return self.taps.size

    @property
    def delay(self) -> int:
        return (self.taps.size - 1) // 2


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM and 32-bit float, mono; multichannel averaged on load)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioBuffer:
    sample_rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"unsupported WAV sample format {data.dtype} in {path}")
    return AudioBuffer(samples, int(sample_rate))


def write_wav(path, buffer: AudioBuffer, encoding: str = "float32") -> None:
    if encoding == "float32":
        wavfile.write(path, buffer.sample_rate, buffer.samples.astype(np.float32))
    elif encoding == "float64":
        wavfile.write(path, buffer.sample_rate, buffer.samples)
    elif encoding == "int16":
        clipped = np.clip(buffer.samples, -1.0, 1.0)
        wavfile.write(path, buffer.sample_rate, np.round(clipped * 32767.0).astype(np.int16))
    else:
        raise InvalidInputError(f"unsupported encoding {encoding!r}")


# ---------------------------------------------------------------------------
# STFT / inverse STFT / mel
# ---------------------------------------------------------------------------

def _analysis_window(cfg: SpectralConfig) -> np.ndarray:
    try:
        win = scipy.signal.get_window(cfg.window, cfg.window_length, fftbins=True)
    except ValueError as exc:
        raise ConfigError(f"unknown window {cfg.window!r}") from exc
    return win.astype(np.float64)


def frame_count(num_samples: int, cfg: SpectralConfig) -> int:
    if cfg.center:
        return 1 + math.ceil(num_samples / cfg.hop_length)
    return 1 + (num_samples - cfg.window_length) // cfg.hop_length


def stft(buffer: AudioBuffer, cfg: SpectralConfig) -> np.ndarray:
    """Complex spectrogram of shape (fft_size // 2 + 1, frames)."""
    x = buffer.samples
    if x.size == 0:
        raise InvalidInputError("cannot take the STFT of an empty buffer")
    win, hop = cfg.window_length, cfg.hop_length
    if not cfg.center and x.size < win:
        raise InvalidInputError("buffer shorter than one window with center=False")
    n_frames = frame_count(x.size, cfg)
    if cfg.center:
        pad_left = win // 2
        total = (n_frames - 1) * hop + win
        x = np.pad(x, (pad_left, total - pad_left - x.size))
    w = _analysis_window(cfg)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * w
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1).T


def istft(spec: np.ndarray, cfg: SpectralConfig, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` by windowed overlap-add; exact for any NOLA window."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.fft_size // 2 + 1:
        raise InvalidInputError(f"spec shape {spec.shape} does not match fft_size {cfg.fft_size}")
    win, hop = cfg.window_length, cfg.hop_length
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=1)[:, :win]
    w = _analysis_window(cfg)
    total = (n_frames - 1) * hop + win
    num = np.zeros(total)
    den = np.zeros(total)
    for k in range(n_frames):
        sl = slice(k * hop, k * hop + win)
        num[sl] += frames[k] * w
        den[sl] += w**2
    start = win // 2 if cfg.center else 0
    if length is None:
        length = total - start if cfg.center else total
    if start + length > total:
        raise InvalidInputError(f"requested length {length} exceeds synthesized extent")
    region = slice(start, start + length)
    if np.min(den[region]) < 1e-10:
        raise ConfigError("window/hop pair violates the overlap-add coverage condition")
    return num[region] / den[region]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, mel_bins: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, shape (mel_bins, fft_size // 2 + 1), peak gain 1."""
    n_bins = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2)
    hz_edges = mel_to_hz(mel_edges)
    fb = np.zeros((mel_bins, n_bins))
    for m in range(mel_bins):
        lo, center, hi = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_spectrogram(buffer: AudioBuffer, cfg: SpectralConfig) -> np.ndarray:
    """Power-domain mel spectrogram, shape (mel_bins, frames), entries >= 0."""
    fmax = cfg.resolve_fmax(buffer.sample_rate)
    power = np.abs(stft(buffer, cfg)) ** 2
    fb = mel_filterbank(buffer.sample_rate, cfg.fft_size, cfg.mel_bins, cfg.fmin, fmax)
    return fb @ power


# ---------------------------------------------------------------------------
# FIR design and resampling
# ---------------------------------------------------------------------------

# Windowed-sinc lowpass layout, as fractions of the nominal cutoff c:
# passband edge 0.9c, -6 dB design point 1.05c, stopband edge 1.2c.
_DESIGN_CENTER = 1.05
_STOPBAND_EDGE = 1.2
_TRANSITION_FRACTION = 0.3


def kaiser_tap_count(stopband_db: float, transition_norm: float) -> int:
    """Odd tap count for a Kaiser design with the given transition width (fraction of Nyquist)."""
    if transition_norm <= 0:
        raise ConfigError("transition width must be positive")
    taps = int(math.ceil((stopband_db - 7.95) / (2.285 * math.pi * transition_norm))) + 1
    taps = max(taps, 11)
    return taps + 1 if taps % 2 == 0 else taps


def design_lowpass_fir(cutoff_norm: float, num_taps: int, stopband_db: float) -> FilterKernel:
    """Kaiser-windowed sinc low-pass.

    Guarantees (measured, not just nominal): DC gain exactly 1, symmetric taps,
    and at least ``stopband_db - 3`` dB of attenuation from 1.2x the cutoff up
    to Nyquist.  Raises :class:`FilterDesignError` with the achievable figure
    when the tap budget cannot meet that.
    """
    if not (0.0 < cutoff_norm < 1.0):
        raise ConfigError(f"cutoff_norm must be in (0, 1), got {cutoff_norm}")
    if num_taps % 2 == 0 or num_taps < 3:
        raise ConfigError(f"num_taps must be odd and >= 3, got {num_taps}")
    if stopband_db <= 0:
        raise ConfigError("stopband_db must be positive")
    beta = scipy.signal.kaiser_beta(max(stopband_db, 21.0))
    design_cutoff = min(_DESIGN_CENTER * cutoff_norm, cutoff_norm + 0.5 * (1.0 - cutoff_norm))
    taps = scipy.signal.firwin(num_taps, design_cutoff, window=("kaiser", beta), fs=2.0)
    taps = taps / taps.sum()

    stop_edge = _STOPBAND_EDGE * cutoff_norm
    if stop_edge < 1.0:
        grid = np.linspace(stop_edge, 1.0, 512)
        _, response = scipy.signal.freqz(taps, worN=grid * np.pi)
        achieved = -20.0 * np.log10(np.max(np.abs(response)) + 1e-300)
        if achieved < stopband_db - 3.0:
            raise FilterDesignError(
                f"{num_taps} taps achieve only {achieved:.1f} dB at 1.2x cutoff"
                f" (requested {stopband_db:.1f} dB); increase the tap count",
                achievable_db=float(achieved),
            )
    return FilterKernel(taps, cutoff_norm, float(stopband_db))


def robust_lowpass(cutoff_norm: float, stopband_db: float, transition_norm: float) -> FilterKernel:
    """Design starting from the Kaiser tap estimate, escalating the tap count
    until the measured-stopband contract holds (the estimate runs optimistic
    when the stopband region is a thin sliver below Nyquist)."""
    taps = kaiser_tap_count(stopband_db, transition_norm)
    last_exc = None
    for _ in range(6):
        try:
            return design_lowpass_fir(cutoff_norm, taps, stopband_db)
        except FilterDesignError as exc:
            last_exc = exc
            taps = 2 * taps - 1
    raise last_exc


def default_antialias_kernel(cutoff_norm: float, stopband_db: float = 60.0) -> FilterKernel:
    """Kernel whose stopband starts at ``1.2 * cutoff_norm``, sized by the Kaiser formula."""
    return robust_lowpass(cutoff_norm, stopband_db, _TRANSITION_FRACTION * cutoff_norm)


def apply_fir(x: np.ndarray, kernel: FilterKernel) -> np.ndarray:
    """Filter with group-delay compensation; output length equals input length."""
    d = kernel.delay
    y = scipy.signal.fftconvolve(x, kernel.taps, mode="full")
    return y[d : d + x.size]


def resample_by_factor(buffer: AudioBuffer, up: int, down: int, kernel: FilterKernel | None = None) -> AudioBuffer:
    """Rational-rate resampling through an anti-aliased polyphase stage.

    The kernel is applied at the upsampled rate; its group delay is removed so
    aligned tones stay aligned. ``up == down`` short-circuits to a copy.
    """
    if up < 1 or down < 1:
        raise InvalidInputError("up and down must be >= 1")
    g = math.gcd(up, down)
    up, down = up // g, down // g
    new_rate = buffer.sample_rate * up
    if new_rate % down != 0:
        raise InvalidInputError(f"sample rate {buffer.sample_rate} * {up}/{down} is not an integer")
    new_rate //= down
    if up == 1 and down == 1:
        return AudioBuffer(buffer.samples.copy(), buffer.sample_rate)
    if kernel is None:
        kernel = default_antialias_kernel(1.0 / (_STOPBAND_EDGE * max(up, down)))

    x = buffer.samples
    out_len = -((-x.size * up) // down)  # ceil
    delay = kernel.delay
    # Left-pad so the group delay lands on an exact output-grid index.
    z = (-delay * pow(up, -1, down)) % down if down > 1 else 0
    m0 = (delay + z * up) // down
    # Right-pad so upfirdn covers the last requested output sample.
    needed_up_idx = (m0 + out_len - 1) * down
    have_up_idx = (x.size + z - 1) * up + kernel.num_taps - 1
    pad_tail = max(0, -((have_up_idx - needed_up_idx) // -up))  # ceil of deficit / up
    x_padded = np.concatenate([np.zeros(z), x, np.zeros(pad_tail)])
    y = scipy.signal.upfirdn(kernel.taps * up, x_padded, up=up, down=down)
    return AudioBuffer(y[m0 : m0 + out_len], new_rate)


# ---------------------------------------------------------------------------
# Log-spectral distance
# ---------------------------------------------------------------------------

def log_spectral_distance(reference: AudioBuffer, estimate: AudioBuffer, cfg: SpectralConfig | None = None) -> float:
    """Frame-averaged RMS difference of log power spectra, in dB.

    LSD = mean_frames sqrt( mean_bins (10 log10(|S|^2 + e) - 10 log10(|S_hat|^2 + e))^2 )
    with e = 1e-10. Symmetric in its arguments.
    """
    if cfg is None:
        cfg = SpectralConfig()
    if len(reference) != len(estimate):
        raise InvalidInputError(f"length mismatch: {len(reference)} vs {len(estimate)}")
    if reference.sample_rate != estimate.sample_rate:
        raise InvalidInputError("sample-rate mismatch")
    ref_db = 10.0 * np.log10(np.abs(stft(reference, cfg)) ** 2 + POWER_FLOOR)
    est_db = 10.0 * np.log10(np.abs(stft(estimate, cfg)) ** 2 + POWER_FLOOR)
    return float(np.mean(np.sqrt(np.mean((ref_db - est_db) ** 2, axis=0))))
