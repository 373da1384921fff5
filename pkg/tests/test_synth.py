import numpy as np
import pytest

from revoice.audio_core import read_wav
from revoice.errors import InvalidInputError
from revoice.synth import build_demo_corpus, synth_noise, synth_rir, synth_utterance

SR = 8000


class TestUtterance:
    def test_shape_and_level(self):
        utt = synth_utterance(seed=0, duration_seconds=2.0, sample_rate=SR)
        assert utt.sample_rate == SR
        assert len(utt.samples) == 2 * SR
        peak = np.max(np.abs(utt.samples))
        assert 0.4 < peak < 0.6
        rms = np.sqrt(np.mean(utt.samples**2))
        assert 0.03 < rms < 0.3

    def test_deterministic_per_seed(self):
        a = synth_utterance(seed=7, duration_seconds=1.0, sample_rate=SR)
        b = synth_utterance(seed=7, duration_seconds=1.0, sample_rate=SR)
        c = synth_utterance(seed=8, duration_seconds=1.0, sample_rate=SR)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_no_digital_silence(self):
        # every spectral bin should sit above the log-metric floor; pauses
        # carry room tone instead of exact zeros
        utt = synth_utterance(seed=3, duration_seconds=3.0, sample_rate=SR)
        window = SR // 20  # 50 ms
        frames = utt.samples[: len(utt.samples) // window * window].reshape(-1, window)
        frame_rms = np.sqrt(np.mean(frames**2, axis=1))
        assert frame_rms.min() > 0.002

    def test_bad_duration(self):
        with pytest.raises(InvalidInputError):
            synth_utterance(seed=0, duration_seconds=0.0, sample_rate=SR)


class TestNoise:
    def test_kinds_and_peak(self):
        for kind in ("white", "pink", "babble", "music"):
            bed = synth_noise(seed=1, duration_seconds=1.0, sample_rate=SR, kind=kind)
            assert len(bed.samples) == SR
            assert np.max(np.abs(bed.samples)) == pytest.approx(0.5, rel=1e-9)

    def test_pink_tilts_down(self):
        bed = synth_noise(seed=2, duration_seconds=4.0, sample_rate=SR, kind="pink")
        spec = np.abs(np.fft.rfft(bed.samples)) ** 2
        freqs = np.fft.rfftfreq(len(bed.samples), 1 / SR)
        low = spec[(freqs > 50) & (freqs < 500)].mean()
        high = spec[(freqs > 2000) & (freqs < 3900)].mean()
        assert low > 4 * high

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            synth_noise(seed=0, duration_seconds=1.0, sample_rate=SR, kind="thunder")


class TestRir:
    def test_direct_path_and_decay(self):
        rir = synth_rir(seed=0, sample_rate=SR, rt60_seconds=0.3)
        h = rir.samples
        assert h[0] == 1.0
        assert len(h) == int(1.5 * 0.3 * SR) + 1
        third = int(0.1 * SR)
        early = np.sum(h[1 : 1 + third] ** 2)
        late = np.sum(h[int(0.3 * SR) :] ** 2)
        assert early > 10 * late

    def test_bad_rt60(self):
        with pytest.raises(InvalidInputError):
            synth_rir(seed=0, sample_rate=SR, rt60_seconds=0.0)


class TestDemoCorpus:
    def test_tree_layout_and_determinism(self, tmp_path):
        dirs = build_demo_corpus(tmp_path / "a", num_utterances=3, seed=5, sample_rate=SR)
        cleans = sorted(p.name for p in dirs["clean"].glob("*.wav"))
        assert cleans == ["utt_000.wav", "utt_001.wav", "utt_002.wav"]
        noises = sorted(p.name for p in dirs["noise"].glob("*.wav"))
        assert noises == ["babble.wav", "music_chords.wav", "pink.wav", "white.wav"]
        assert len(list(dirs["rir"].glob("*.wav"))) == 2
        for p in dirs["clean"].glob("*.wav"):
            assert read_wav(p).sample_rate == SR
        build_demo_corpus(tmp_path / "b", num_utterances=3, seed=5, sample_rate=SR)
        a = (tmp_path / "a" / "clean" / "utt_001.wav").read_bytes()
        b = (tmp_path / "b" / "clean" / "utt_001.wav").read_bytes()
        assert a == b
