"""Synthetic speech-like material for demos and smoke tests: harmonic tone
segments with moving pitch and formant peaks, noise bursts standing in for
fricatives, plus noise beds and impulse responses for the degradation chain.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .audio_core import AudioBuffer, write_wav
from .errors import InvalidInputError


def _voiced_segment(rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    dur = rng.uniform(0.15, 0.4)
    n = int(dur * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 280.0)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    formant = rng.uniform(300.0, 2800.0)
    bandwidth = rng.uniform(200.0, 600.0)
    top = min(3500.0, 0.45 * sample_rate)
    out = np.zeros(n)
    k = 1
    while k * f0 < top:
        freq = k * f0
        # spectral tilt plus one formant resonance shapes the harmonic amps
        amp = (1.0 / k) * (1.0 + 3.0 * np.exp(-((freq - formant) ** 2) / (2 * bandwidth**2)))
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        k += 1
    ramp = min(int(0.02 * sample_rate), n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[n - ramp :] = np.linspace(1.0, 0.0, ramp)
    return out * env * rng.uniform(0.5, 1.0)


def _fricative_segment(rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    dur = rng.uniform(0.08, 0.2)
    n = int(dur * sample_rate)
    nyq = sample_rate / 2
    lo = rng.uniform(0.25, 0.55)
    hi = min(0.95, lo + rng.uniform(0.2, 0.4))
    taps = signal.firwin(101, [lo * nyq, hi * nyq], pass_zero=False, fs=sample_rate)
    noise = signal.fftconvolve(rng.standard_normal(n), taps, mode="same")
    ramp = min(int(0.01 * sample_rate), n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[n - ramp :] = np.linspace(1.0, 0.0, ramp)
    return noise * env * rng.uniform(0.15, 0.35)


def _pink_noise(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    spec /= np.sqrt(np.maximum(freqs, 1.0))
    return np.fft.irfft(spec, n)


def synth_utterance(seed: int, duration_seconds: float, sample_rate: int) -> AudioBuffer:
    """Speech-shaped test signal: voiced harmonic stretches interleaved with
    noise bursts and pauses, over a quiet room-tone bed, peak-normalized to
    roughly 0.5.

    The bed matters: pure tone stacks leave inter-harmonic bins and pauses at
    the spectral log-floor, where log-domain metrics measure an arbitrary
    floor constant instead of signal structure.  Recorded speech always
    carries a noise floor, so the bed makes the material more, not less,
    realistic.  It is spectrally flat so every analysis bin sits at a level a
    small model can actually match; a sloped bed leaves the top octaves back
    at the log-floor."""
    if duration_seconds <= 0:
        raise InvalidInputError("duration must be positive")
    rng = np.random.default_rng(seed)
    total = int(duration_seconds * sample_rate)
    pieces = []
    have = 0
    while have < total:
        roll = rng.uniform()
        if roll < 0.6:
            seg = _voiced_segment(rng, sample_rate)
        elif roll < 0.85:
            seg = _fricative_segment(rng, sample_rate)
        else:
            seg = np.zeros(int(rng.uniform(0.05, 0.15) * sample_rate))
        pieces.append(seg)
        have += len(seg)
    samples = np.concatenate(pieces)[:total]
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples * (0.5 / peak)
    bed = rng.standard_normal(total)
    bed *= 0.012 / max(np.sqrt(np.mean(bed**2)), 1e-12)
    return AudioBuffer(samples=samples + bed, sample_rate=sample_rate)


def synth_noise(seed: int, duration_seconds: float, sample_rate: int, kind: str = "pink") -> AudioBuffer:
    """Noise beds for the degradation mixer: white, pink, babble-ish modulated
    noise, or a sustained-chord bed (name it with a music prefix to hit the
    mixer's music SNR range)."""
    rng = np.random.default_rng(seed)
    n = int(duration_seconds * sample_rate)
    t = np.arange(n) / sample_rate
    if kind == "white":
        samples = rng.standard_normal(n)
    elif kind == "pink":
        samples = _pink_noise(rng, n, sample_rate)
    elif kind == "babble":
        base = rng.standard_normal(n)
        spec = np.fft.rfft(base)
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec *= np.exp(-freqs / 1500.0)
        base = np.fft.irfft(spec, n)
        mod = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 6.28))
        samples = base * mod
    elif kind == "music":
        root = rng.uniform(110.0, 220.0)
        samples = np.zeros(n)
        for ratio in (1.0, 1.25, 1.5, 2.0):
            tremolo = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t)
            samples += tremolo * np.sin(2 * np.pi * root * ratio * t + rng.uniform(0, 6.28))
    else:
        raise InvalidInputError(f"unknown noise kind {kind!r}")
    peak = np.max(np.abs(samples))
    return AudioBuffer(samples=samples * (0.5 / peak), sample_rate=sample_rate)


def synth_rir(seed: int, sample_rate: int, rt60_seconds: float = 0.3) -> AudioBuffer:
    """Exponentially decaying noise tail behind a unit direct path."""
    if rt60_seconds <= 0:
        raise InvalidInputError("rt60 must be positive")
    rng = np.random.default_rng(seed)
    n = int(1.5 * rt60_seconds * sample_rate)
    t = np.arange(n) / sample_rate
    # RT60: energy decays by 60 dB at t = rt60
    tail = rng.standard_normal(n) * 10.0 ** (-3.0 * t / rt60_seconds)
    h = np.zeros(n + 1)
    h[0] = 1.0
    h[1:] = 0.3 * tail
    return AudioBuffer(samples=h, sample_rate=sample_rate)


def build_demo_corpus(out_dir, num_utterances: int, seed: int, sample_rate: int, duration_seconds: float = 3.0) -> dict:
    """Writes clean/, noise/ and rir/ wav trees; returns the directory map."""
    out_dir = Path(out_dir)
    clean_dir = out_dir / "clean"
    noise_dir = out_dir / "noise"
    rir_dir = out_dir / "rir"
    for d in (clean_dir, noise_dir, rir_dir):
        d.mkdir(parents=True, exist_ok=True)
    for i in range(num_utterances):
        utt = synth_utterance(seed * 1000 + i, duration_seconds, sample_rate)
        write_wav(clean_dir / f"utt_{i:03d}.wav", utt)
    for j, kind in enumerate(("white", "pink", "babble")):
        bed = synth_noise(seed * 2000 + j, 5.0, sample_rate, kind)
        write_wav(noise_dir / f"{kind}.wav", bed)
    bed = synth_noise(seed * 2000 + 99, 5.0, sample_rate, "music")
    write_wav(noise_dir / "music_chords.wav", bed)
    for k in range(2):
        rir = synth_rir(seed * 3000 + k, sample_rate, rt60_seconds=0.2 + 0.1 * k)
        write_wav(rir_dir / f"rir_{k}.wav", rir)
    return {"clean": clean_dir, "noise": noise_dir, "rir": rir_dir}
