"""Seeded degradation simulator: additive noise at controlled SNR, reverb, and
a randomly sampled chain of one to five waveform distortions.

Recipes are plain JSON-serializable records; applying a persisted recipe to the
same clean input reproduces the degraded waveform bit-exactly.  All appliers
preserve length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio_core import AudioBuffer, apply_fir, read_wav, resample_by_factor, robust_lowpass
from .errors import (
    AssetResolutionError,
    InvalidAssetError,
    InvalidInputError,
    InvalidRecipeError,
)

# Distortion kinds eligible for the random chain (noise and reverb are managed
# separately: reverb is a coin flip, noise is always appended last).
CHAIN_KINDS = (
    "band_limit",
    "eq",
    "clip_clamp",
    "clip_tanh",
    "clip_sigmoid",
    "attenuation",
    "packet_loss",
    "codec_approx",
)

PACKET_RAMP_SECONDS = 0.005


@dataclass(frozen=True)
class DegradationConfig:
    """Parameter ranges for :func:`sample_recipe`. Ranges not fixed by the
    training methodology are exposed here with plausible defaults."""

    snr_range: tuple[float, float] = (-5.0, 30.0)
    music_snr_range: tuple[float, float] = (-10.0, 5.0)
    music_prefix: str = "music"
    reverb_probability: float = 0.5
    max_distortions: int = 5
    enabled_kinds: tuple[str, ...] = CHAIN_KINDS
    band_limit_frac_range: tuple[float, float] = (0.05, 0.45)  # fraction of sample rate
    eq_bands: int = 8
    eq_gain_db_range: tuple[float, float] = (-12.0, 12.0)
    clip_level_range: tuple[float, float] = (0.1, 0.9)
    attenuation_db_range: tuple[float, float] = (-24.0, 0.0)
    packet_burst_count_range: tuple[int, int] = (1, 3)
    packet_burst_seconds: tuple[float, float] = (0.05, 0.4)
    codec_bits_choices: tuple[int, ...] = (6, 8, 10)

    def __post_init__(self):
        unknown = set(self.enabled_kinds) - set(CHAIN_KINDS)
        if unknown:
            raise InvalidRecipeError(f"unknown distortion kinds {sorted(unknown)}")
        if not 1 <= self.max_distortions <= len(self.enabled_kinds):
            raise InvalidRecipeError("max_distortions must be in [1, number of enabled kinds]")


@dataclass(frozen=True)
class DegradationRecipe:
    """Seed plus an ordered list of distortion steps with all numeric parameters."""

    seed: int
    steps: tuple = ()

    def __post_init__(self):
        steps = tuple(dict(s) for s in self.steps)
        for s in steps:
            if "kind" not in s:
                raise InvalidRecipeError(f"step missing 'kind': {s}")
        object.__setattr__(self, "steps", steps)

    def to_json(self) -> str:
        return json.dumps({"seed": int(self.seed), "steps": list(self.steps)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecipe":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidRecipeError(f"unparseable recipe: {exc}") from exc
        if not isinstance(raw, dict) or "seed" not in raw or "steps" not in raw:
            raise InvalidRecipeError("recipe must be an object with 'seed' and 'steps'")
        return cls(seed=int(raw["seed"]), steps=tuple(raw["steps"]))


class AssetStore:
    """Directory-backed inventory of noise and RIR WAV files.

    Assets are referenced by their path relative to the scanned directory (with
    forward slashes), so recipes stay portable across machines.
    """

    def __init__(self, noise_dir=None, rir_dir=None):
        self.noise_index = self._scan(noise_dir)
        self.rir_index = self._scan(rir_dir)

    @staticmethod
    def _scan(root) -> dict:
        if root is None:
            return {}
        root = Path(root)
        if not root.is_dir():
            raise InvalidAssetError(f"asset directory {root} does not exist")
        index = {}
        for path in sorted(root.rglob("*.wav")):
            buf = read_wav(path)
            if len(buf) == 0:
                raise InvalidAssetError(f"empty asset {path}")
            name = path.relative_to(root).as_posix()
            index[name] = {"path": path, "num_samples": len(buf), "sample_rate": buf.sample_rate}
        return index

    @property
    def noise_names(self) -> tuple:
        return tuple(sorted(self.noise_index))

    @property
    def rir_names(self) -> tuple:
        return tuple(sorted(self.rir_index))

    def load_noise(self, name: str) -> AudioBuffer:
        if name not in self.noise_index:
            raise AssetResolutionError(f"noise asset {name!r} not found in store")
        return read_wav(self.noise_index[name]["path"])

    def load_rir(self, name: str) -> AudioBuffer:
        if name not in self.rir_index:
            raise AssetResolutionError(f"rir asset {name!r} not found in store")
        return read_wav(self.rir_index[name]["path"])


def item_seed(global_seed: int, item_index: int) -> int:
    """Stable per-item seed; independent of worker layout, so parallel dataset
    workers reproduce the same stream regardless of sharding."""
    ss = np.random.SeedSequence([int(global_seed), int(item_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Individual appliers (pure functions, length preserving)
# ---------------------------------------------------------------------------

def _tile_to_length(noise: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    if noise.size == 0:
        raise InvalidAssetError("noise asset is empty")
    idx = (offset + np.arange(length)) % noise.size
    return noise[idx]


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float, offset: int = 0) -> AudioBuffer:
    """Add noise scaled so that 10*log10(P_clean / P_noise) == snr_db exactly.

    The noise is tiled or cropped to the clean length (starting at ``offset``
    samples into the asset); the clean component is left unscaled.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InvalidInputError("mix_at_snr requires matching sample rates")
    n = _tile_to_length(noise.samples, len(clean), offset)
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(n**2))
    if p_noise <= 0.0:
        raise InvalidAssetError("noise segment has zero power")
    if p_clean <= 0.0:
        raise InvalidInputError("clean signal has zero power; SNR undefined")
    scale = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean.with_samples(clean.samples + scale * n)


def apply_reverb(clean: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Full convolution, aligned so the RIR's peak tap maps to zero delay,
    trimmed to the input length and rescaled to the input RMS."""
    if clean.sample_rate != rir.sample_rate:
        raise InvalidInputError("apply_reverb requires matching sample rates")
    h = rir.samples
    if h.size == 0 or not np.any(h):
        raise InvalidAssetError("RIR is empty or all-zero")
    lag = int(np.argmax(np.abs(h)))
    wet = scipy.signal.fftconvolve(clean.samples, h, mode="full")[lag : lag + len(clean)]
    rms_in = clean.rms()
    rms_out = float(np.sqrt(np.mean(wet**2)))
    if rms_out > 0.0:
        wet = wet * (rms_in / rms_out)
    return clean.with_samples(wet)


def apply_clipping(buffer: AudioBuffer, mode: str, level: float) -> AudioBuffer:
    if level <= 0:
        raise InvalidInputError(f"clipping level must be > 0, got {level}")
    x = buffer.samples
    if mode == "clamp":
        y = np.clip(x, -level, level)
    elif mode == "tanh":
        y = level * np.tanh(x / level)
    elif mode == "sigmoid":
        y = level * (2.0 / (1.0 + np.exp(-2.0 * x / level)) - 1.0)
    else:
        raise InvalidInputError(f"unknown clipping mode {mode!r}")
    return buffer.with_samples(y)


def apply_band_limit(buffer: AudioBuffer, cutoff_hz: float, stopband_db: float = 60.0) -> AudioBuffer:
    """Low-pass such that content above ``cutoff_hz`` is attenuated by at least
    ``stopband_db - 3`` dB (design places its stopband edge at the cutoff)."""
    nyquist = buffer.sample_rate / 2.0
    if not (0.0 < cutoff_hz < nyquist):
        raise InvalidInputError(f"cutoff {cutoff_hz} Hz outside (0, {nyquist})")
    design_norm = (cutoff_hz / nyquist) / 1.2
    kernel = robust_lowpass(design_norm, stopband_db, 0.3 * design_norm)
    return buffer.with_samples(apply_fir(buffer.samples, kernel))


def apply_packet_loss(buffer: AudioBuffer, bursts) -> AudioBuffer:
    """Zero out each (start_s, duration_s) burst with 5 ms raised-cosine edge
    ramps inside the burst; samples outside all bursts are bit-identical."""
    x = buffer.samples.copy()
    sr = buffer.sample_rate
    spans = []
    for start_s, duration_s in bursts:
        if duration_s <= 0:
            raise InvalidRecipeError(f"burst duration must be positive, got {duration_s}")
        a = int(round(start_s * sr))
        b = a + int(round(duration_s * sr))
        if a < 0 or b > x.size:
            raise InvalidRecipeError(f"burst ({start_s}, {duration_s}) exceeds signal bounds")
        spans.append((a, b))
    spans.sort()
    for (a0, b0), (a1, _) in zip(spans, spans[1:]):
        if a1 < b0:
            raise InvalidRecipeError("packet-loss bursts overlap")
    ramp_full = int(round(PACKET_RAMP_SECONDS * sr))
    for a, b in spans:
        n = b - a
        r = min(ramp_full, n // 2)
        gain = np.zeros(n)
        if r > 0:
            down = 0.5 * (1.0 + np.cos(np.pi * np.arange(1, r + 1) / r))  # ~1 -> exactly 0
            gain[:r] = down
            gain[n - r :] = down[::-1]
        x[a:b] *= gain
    return buffer.with_samples(x)


def apply_eq(buffer: AudioBuffer, gains_db, num_taps: int = 255) -> AudioBuffer:
    """Zero-phase multi-band EQ: linear-phase FIR fitted to the band gain curve,
    applied with its group delay removed."""
    gains_db = np.asarray(gains_db, dtype=np.float64)
    if gains_db.ndim != 1 or gains_db.size < 2:
        raise InvalidInputError("eq needs at least two band gains")
    centers = (np.arange(gains_db.size) + 0.5) / gains_db.size
    freq = np.concatenate([[0.0], centers, [1.0]])
    gain = 10.0 ** (np.concatenate([[gains_db[0]], gains_db, [gains_db[-1]]]) / 20.0)
    taps = scipy.signal.firwin2(num_taps, freq, gain)
    d = (num_taps - 1) // 2
    y = scipy.signal.fftconvolve(buffer.samples, taps, mode="full")[d : d + len(buffer)]
    return buffer.with_samples(y)


def apply_attenuation(buffer: AudioBuffer, gain_db: float) -> AudioBuffer:
    return buffer.with_samples(buffer.samples * 10.0 ** (gain_db / 20.0))


def apply_codec_approx(buffer: AudioBuffer, bits: int, mu: float = 255.0) -> AudioBuffer:
    """Codec-like nonlinearity: mu-law compand, uniform quantization at the
    given depth, then expand. Bits in {6, 8, 10} emulate bitrate tiers."""
    if bits not in (6, 8, 10):
        raise InvalidInputError(f"codec bits must be one of 6, 8, 10; got {bits}")
    x = np.clip(buffer.samples, -1.0, 1.0)
    companded = np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)
    levels = 2**bits
    step = 2.0 / levels
    q = np.clip(np.floor((companded + 1.0) / step), 0, levels - 1)
    quantized = (q + 0.5) * step - 1.0
    expanded = np.sign(quantized) * ((1.0 + mu) ** np.abs(quantized) - 1.0) / mu
    return buffer.with_samples(expanded)


def apply_misc(buffer: AudioBuffer, kind: str, params: dict) -> AudioBuffer:
    if kind == "eq":
        return apply_eq(buffer, params["gains_db"])
    if kind == "attenuation":
        return apply_attenuation(buffer, params["gain_db"])
    if kind == "codec_approx":
        return apply_codec_approx(buffer, int(params["bits"]))
    raise InvalidInputError(f"unknown misc kind {kind!r}")


# ---------------------------------------------------------------------------
# Recipe sampling and application
# ---------------------------------------------------------------------------

def sample_recipe(rng_seed: int, config: DegradationConfig, assets: AssetStore) -> DegradationRecipe:
    """Draw a recipe: optional reverb, then 1..max_distortions distinct chain
    distortions in random order, then additive noise. Fully determined by seed."""
    if not assets.noise_names:
        raise InvalidAssetError("asset store has no noise files; noise is always applied")
    rng = np.random.default_rng(rng_seed)
    steps = []

    use_reverb = bool(assets.rir_names) and rng.random() < config.reverb_probability
    if use_reverb:
        rir_name = str(rng.choice(assets.rir_names))
        steps.append({"kind": "reverb", "asset": rir_name})

    count = int(rng.integers(1, config.max_distortions + 1))
    kinds = [str(k) for k in rng.choice(config.enabled_kinds, size=count, replace=False)]
    for kind in kinds:
        if kind == "band_limit":
            lo, hi = config.band_limit_frac_range
            steps.append({"kind": kind, "cutoff_frac": float(rng.uniform(lo, hi))})
        elif kind == "eq":
            lo, hi = config.eq_gain_db_range
            gains = rng.uniform(lo, hi, size=config.eq_bands)
            steps.append({"kind": kind, "gains_db": [float(g) for g in gains]})
        elif kind in ("clip_clamp", "clip_tanh", "clip_sigmoid"):
            lo, hi = config.clip_level_range
            steps.append({"kind": kind, "level": float(rng.uniform(lo, hi))})
        elif kind == "attenuation":
            lo, hi = config.attenuation_db_range
            steps.append({"kind": kind, "gain_db": float(rng.uniform(lo, hi))})
        elif kind == "packet_loss":
            lo, hi = config.packet_burst_count_range
            n_bursts = int(rng.integers(lo, hi + 1))
            dlo, dhi = config.packet_burst_seconds
            bursts = [[float(rng.uniform(0.0, 1.0)), float(rng.uniform(dlo, dhi))] for _ in range(n_bursts)]
            steps.append({"kind": kind, "bursts_frac": bursts})
        elif kind == "codec_approx":
            steps.append({"kind": kind, "bits": int(rng.choice(config.codec_bits_choices))})
        else:
            raise InvalidRecipeError(f"sampler does not know kind {kind!r}")

    noise_name = str(rng.choice(assets.noise_names))
    snr_lo, snr_hi = (
        config.music_snr_range if noise_name.startswith(config.music_prefix) else config.snr_range
    )
    steps.append(
        {
            "kind": "noise",
            "asset": noise_name,
            "snr_db": float(rng.uniform(snr_lo, snr_hi)),
            "offset": int(rng.integers(0, 2**31)),
        }
    )
    return DegradationRecipe(seed=int(rng_seed), steps=tuple(steps))


def _resolve_bursts_frac(bursts_frac, num_samples: int, sample_rate: int):
    """Turn (center_fraction, duration_s) draws into sorted non-overlapping
    (start_s, duration_s) bursts inside the signal.

    Overlaps are resolved on integer sample indices (the applier's rounding
    could otherwise re-introduce a one-sample collision) and the emitted times
    are sample-aligned so they round back to the same indices."""
    duration = num_samples / sample_rate
    raw = []
    for center_frac, dur_s in bursts_frac:
        d = min(float(dur_s), duration)
        start = min(max(center_frac * duration - d / 2.0, 0.0), duration - d)
        a = int(round(start * sample_rate))
        b = min(a + int(round(d * sample_rate)), num_samples)
        raw.append((a, b))
    raw.sort()
    resolved = []
    cursor = 0
    for a, b in raw:
        a = max(a, cursor)
        if b - a >= 1:
            resolved.append((a / sample_rate, (b - a) / sample_rate))
            cursor = b
    return resolved


def _match_rate(asset: AudioBuffer, sample_rate: int) -> AudioBuffer:
    if asset.sample_rate == sample_rate:
        return asset
    g = math.gcd(sample_rate, asset.sample_rate)
    return resample_by_factor(asset, sample_rate // g, asset.sample_rate // g)


def degrade(clean: AudioBuffer, recipe: DegradationRecipe, assets: AssetStore):
    """Apply the recipe's steps in order. Returns (degraded, manifest_entry).

    Output length equals input length. The waveform is peak-normalized only if
    it exceeds full scale, and the applied factor is recorded in the manifest.
    """
    out = clean.with_samples(clean.samples.copy())
    for step in recipe.steps:
        kind = step["kind"]
        if kind == "reverb":
            rir = _match_rate(assets.load_rir(step["asset"]), out.sample_rate)
            out = apply_reverb(out, rir)
        elif kind == "noise":
            noise = _match_rate(assets.load_noise(step["asset"]), out.sample_rate)
            out = mix_at_snr(out, noise, step["snr_db"], offset=int(step.get("offset", 0)))
        elif kind == "band_limit":
            cutoff_hz = step["cutoff_frac"] * out.sample_rate
            out = apply_band_limit(out, cutoff_hz)
        elif kind in ("clip_clamp", "clip_tanh", "clip_sigmoid"):
            out = apply_clipping(out, kind.removeprefix("clip_"), step["level"])
        elif kind == "packet_loss":
            bursts = _resolve_bursts_frac(step["bursts_frac"], len(out), out.sample_rate)
            out = apply_packet_loss(out, bursts)
        elif kind in ("eq", "attenuation", "codec_approx"):
            out = apply_misc(out, kind, step)
        else:
            raise InvalidRecipeError(f"unknown step kind {kind!r}")
    if len(out) != len(clean):
        raise InvalidRecipeError("internal error: degradation changed the length")

    peak = float(np.max(np.abs(out.samples))) if len(out) else 0.0
    factor = 1.0
    if peak > 1.0:
        factor = 1.0 / peak
        out = out.with_samples(out.samples * factor)
    entry = {"seed": int(recipe.seed), "steps": list(recipe.steps), "peak_norm": factor}
    return out, entry
