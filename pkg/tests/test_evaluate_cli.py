import json
import subprocess
import sys

import numpy as np
import pytest

from revoice.audio_core import AudioBuffer, log_spectral_distance, read_wav, write_wav
from revoice.cli import main
from revoice.errors import ConfigError
from revoice.evaluate import (
    MetricAdapter,
    adapters_from_config,
    evaluate,
    format_report,
    mel_distance,
    snr_db,
    write_report,
)
from revoice.synth import synth_utterance

SR = 8000


@pytest.fixture()
def corpus(tmp_path):
    ref = tmp_path / "ref"
    est = tmp_path / "est"
    deg = tmp_path / "deg"
    for d in (ref, est, deg):
        d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        clean = synth_utterance(seed=10 + i, duration_seconds=1.0, sample_rate=SR)
        noisy = AudioBuffer(clean.samples + 0.05 * rng.standard_normal(len(clean.samples)), SR)
        write_wav(ref / f"utt_{i}.wav", clean)
        write_wav(est / f"utt_{i}.wav", noisy)
        write_wav(deg / f"utt_{i}.wav", AudioBuffer(clean.samples + 0.2 * rng.standard_normal(len(clean.samples)), SR))
    return ref, est, deg


class TestNativeMetrics:
    def test_mel_distance_scale_shift(self):
        x = AudioBuffer(0.3 * np.random.default_rng(1).standard_normal(8192), SR)
        y = AudioBuffer(10.0 * x.samples, SR)
        assert mel_distance(x, x) == 0.0
        assert mel_distance(x, y) == pytest.approx(2.0, abs=1e-6)  # power x100

    def test_snr_db_exact(self):
        rng = np.random.default_rng(2)
        ref = AudioBuffer(rng.standard_normal(4000), SR)
        noise = rng.standard_normal(4000)
        noise *= np.sqrt(np.sum(ref.samples**2) / np.sum(noise**2)) / 10.0  # -20 dB residual
        est = AudioBuffer(ref.samples + noise, SR)
        assert snr_db(ref, est) == pytest.approx(20.0, abs=1e-9)


class TestEvaluate:
    def test_identical_estimates_score_zero(self, corpus):
        ref, _, _ = corpus
        report = evaluate(ref, ref, metrics=("lsd", "mel_distance"))
        assert [row["lsd"] for row in report.rows] == [0.0, 0.0, 0.0]
        assert report.aggregates["lsd"] == 0.0
        assert report.error_counts == {"lsd": 0, "mel_distance": 0}

    def test_lsd_matches_direct_calls(self, corpus):
        ref, est, _ = corpus
        report = evaluate(ref, est, metrics=("lsd",))
        for row in report.rows:
            want = log_spectral_distance(
                read_wav(ref / f"{row['stem']}.wav"), read_wav(est / f"{row['stem']}.wav")
            )
            assert row["lsd"] == pytest.approx(want, rel=1e-12)
        assert report.aggregates["lsd"] == pytest.approx(
            np.mean([row["lsd"] for row in report.rows]), rel=1e-12
        )

    def test_rows_sorted_and_deterministic(self, corpus):
        ref, est, _ = corpus
        a = evaluate(ref, est, metrics=("lsd",))
        b = evaluate(ref, est, metrics=("lsd",))
        assert [r["stem"] for r in a.rows] == sorted(r["stem"] for r in a.rows)
        assert a.rows == b.rows

    def test_corrupt_file_marks_row_error(self, corpus):
        ref, est, _ = corpus
        (est / "utt_1.wav").write_text("not audio")
        report = evaluate(ref, est, metrics=("lsd",))
        by_stem = {r["stem"]: r for r in report.rows}
        assert by_stem["utt_1"]["lsd"] is None
        assert report.error_counts["lsd"] == 1
        good = [r["lsd"] for r in report.rows if r["lsd"] is not None]
        assert report.aggregates["lsd"] == pytest.approx(np.mean(good))

    def test_missing_stems_are_skipped(self, corpus):
        ref, est, _ = corpus
        (est / "utt_2.wav").unlink()
        report = evaluate(ref, est, metrics=("lsd",))
        assert report.skipped == ["utt_2"]
        assert len(report.rows) == 2

    def test_snr_gain_needs_degraded_dir(self, corpus, caplog):
        ref, est, deg = corpus
        with caplog.at_level("WARNING"):
            report = evaluate(ref, est, metrics=("lsd", "snr_gain"))
        assert report.metrics == ("lsd",)
        report = evaluate(ref, deg, metrics=("snr_gain",), degraded_dir=deg)
        for row in report.rows:  # estimate == degraded input: zero gain
            assert row["snr_gain"] == pytest.approx(0.0, abs=1e-9)
        report = evaluate(ref, est, metrics=("snr_gain",), degraded_dir=deg)
        assert all(row["snr_gain"] > 6.0 for row in report.rows)

    def test_unknown_metric_rejected(self, corpus):
        ref, est, _ = corpus
        with pytest.raises(ConfigError, match="pesq"):
            evaluate(ref, est, metrics=("pesq",))


class TestAdapters:
    def test_subprocess_adapter_scores(self, corpus):
        ref, est, _ = corpus
        adapter = MetricAdapter(
            name="fakemos",
            command=(sys.executable, "-c", "import sys; print('MOS = 3.25')", "{ref}", "{est}"),
            pattern=r"MOS = ([0-9.]+)",
        )
        report = evaluate(ref, est, metrics=("fakemos",), adapters={"fakemos": adapter})
        assert all(row["fakemos"] == 3.25 for row in report.rows)
        assert report.aggregates["fakemos"] == pytest.approx(3.25)

    def test_adapter_default_pattern_takes_last_float(self, tmp_path, corpus):
        ref, est, _ = corpus
        adapter = MetricAdapter(
            name="x", command=(sys.executable, "-c", "print('a 1.5 then 2.5')")
        )
        report = evaluate(ref, est, metrics=("x",), adapters={"x": adapter})
        assert all(row["x"] == 2.5 for row in report.rows)

    def test_adapter_failure_surfaces_as_error_rows(self, corpus):
        ref, est, _ = corpus
        adapter = MetricAdapter(
            name="broken", command=(sys.executable, "-c", "import sys; sys.exit(3)")
        )
        report = evaluate(ref, est, metrics=("broken",), adapters={"broken": adapter})
        assert all(row["broken"] is None for row in report.rows)
        assert report.error_counts["broken"] == 3
        assert report.aggregates["broken"] is None

    def test_adapters_from_config(self):
        adapters = adapters_from_config(
            {"pesq": {"command": "pesq-tool --ref {ref} --est {est}", "pattern": r"score=([\d.]+)"}}
        )
        assert adapters["pesq"].command == ("pesq-tool", "--ref", "{ref}", "--est", "{est}")
        with pytest.raises(ConfigError, match="no command"):
            adapters_from_config({"bad": {}})


class TestReportFormat:
    def test_table_layout(self, corpus, tmp_path):
        ref, est, _ = corpus
        (est / "utt_1.wav").write_text("junk")
        (est / "utt_2.wav").unlink()
        report = evaluate(ref, est, metrics=("lsd",))
        text = format_report(report)
        lines = text.splitlines()
        assert lines[0] == "stem\tlsd"
        assert lines[2].startswith("utt_1\terror")
        assert any(line.startswith("# mean\tlsd\t") for line in lines)
        assert any(line.startswith("# errors\tlsd\t1") for line in lines)
        assert any(line.startswith("# skipped\tutt_2") for line in lines)
        out = write_report(report, tmp_path / "report.tsv")
        assert out.read_text() == text


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Tiny corpus + 2-step training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    from revoice.synth import build_demo_corpus

    dirs = build_demo_corpus(root / "data", num_utterances=2, seed=0, sample_rate=SR)
    rc = main(
        [
            "degrade",
            "--clean-dir", str(dirs["clean"]),
            "--noise-dir", str(dirs["noise"]),
            "--rir-dir", str(dirs["rir"]),
            "--out-dir", str(root),
            "--seed", "0",
        ]
    )
    assert rc == 0
    rc = main(
        [
            "train",
            "--clean-dir", str(dirs["clean"]),
            "--degraded-dir", str(root / "degraded"),
            "--out-dir", str(root / "ckpt"),
            "--steps", "2",
            "--seed", "0",
        ]
    )
    assert rc == 0
    return root, dirs


class TestCli:
    def test_degrade_writes_manifest_and_is_deterministic(self, cli_workspace, tmp_path):
        root, dirs = cli_workspace
        manifest = json.loads((root / "degradation_manifest.json").read_text())
        assert set(manifest) == {"utt_000", "utt_001"}
        rc = main(
            [
                "degrade",
                "--clean-dir", str(dirs["clean"]),
                "--noise-dir", str(dirs["noise"]),
                "--rir-dir", str(dirs["rir"]),
                "--out-dir", str(tmp_path),
                "--seed", "0",
            ]
        )
        assert rc == 0
        replay = json.loads((tmp_path / "degradation_manifest.json").read_text())
        assert replay == manifest
        a = (root / "degraded" / "utt_000.wav").read_bytes()
        b = (tmp_path / "degraded" / "utt_000.wav").read_bytes()
        assert a == b

    def test_train_emits_checkpoint_and_log(self, cli_workspace):
        root, _ = cli_workspace
        assert (root / "ckpt" / "2.ckpt").exists()
        records = [
            json.loads(line)
            for line in (root / "ckpt" / "train_log.jsonl").read_text().splitlines()
        ]
        assert [r["step"] for r in records] == [0, 1]
        assert all("gen_total" in r for r in records)

    def test_enhance_then_evaluate_exit_codes(self, cli_workspace):
        root, dirs = cli_workspace
        rc = main(
            [
                "enhance",
                "--checkpoint", str(root / "ckpt" / "2.ckpt"),
                "--in-dir", str(root / "degraded"),
                "--out-dir", str(root / "enhanced"),
                "--sampler-steps", "2",
                "--seed", "0",
            ]
        )
        assert rc == 0
        wavs = sorted((root / "enhanced").glob("*.wav"))
        assert [p.name for p in wavs] == ["utt_000.wav", "utt_001.wav"]
        rc = main(
            [
                "evaluate",
                "--ref-dir", str(dirs["clean"]),
                "--est-dir", str(root / "enhanced"),
                "--degraded-dir", str(root / "degraded"),
                "--out-dir", str(root / "eval"),
                "--seed", "0",
            ]
        )
        assert rc == 0
        assert (root / "eval" / "report.tsv").exists()

    def test_evaluate_partial_exit_code(self, cli_workspace):
        root, dirs = cli_workspace
        partial = root / "partial"
        partial.mkdir(exist_ok=True)
        src = root / "degraded" / "utt_000.wav"
        (partial / "utt_000.wav").write_bytes(src.read_bytes())
        rc = main(
            [
                "evaluate",
                "--ref-dir", str(dirs["clean"]),
                "--est-dir", str(partial),
                "--metrics", "lsd",
                "--out-dir", str(root / "eval_partial"),
            ]
        )
        assert rc == 2  # utt_001 missing: skipped

    def test_evaluate_nothing_scored_fails(self, cli_workspace, tmp_path):
        root, dirs = cli_workspace
        empty = tmp_path / "empty"
        empty.mkdir()
        (empty / "unrelated.wav").write_text("junk")
        rc = main(
            [
                "evaluate",
                "--ref-dir", str(dirs["clean"]),
                "--est-dir", str(empty),
                "--metrics", "lsd",
                "--out-dir", str(tmp_path / "eval"),
            ]
        )
        assert rc == 1

    def test_demo_skip_train_requires_checkpoint(self, tmp_path):
        rc = main(
            ["demo", "--out-dir", str(tmp_path / "demo"), "--utterances", "1", "--skip-train"]
        )
        assert rc == 1

    def test_console_script_help(self):
        proc = subprocess.run(
            ["revoice", "--help"], capture_output=True, text=True, timeout=60
        )
        assert proc.returncode == 0
        for sub in ("degrade", "train", "finetune", "enhance", "evaluate", "demo"):
            assert sub in proc.stdout
