"""Evaluation harness: native spectral metrics plus subprocess adapters for
external metrics, producing a deterministic tab-separated report.
"""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_core import (
    AudioBuffer,
    SpectralConfig,
    log_spectral_distance,
    mel_spectrogram,
    read_wav,
)
from .errors import ConfigError, InvalidInputError

log = logging.getLogger(__name__)

NATIVE_METRICS = ("lsd", "mel_distance", "snr_gain")
FLOAT_PATTERN = r"(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"


# ---------------------------------------------------------------------------
# Native metrics
# ---------------------------------------------------------------------------

def mel_distance(reference: AudioBuffer, estimate: AudioBuffer, cfg: SpectralConfig | None = None) -> float:
    """Mean absolute difference of log10 mel power (floored at 1e-10)."""
    if reference.sample_rate != estimate.sample_rate:
        raise InvalidInputError("sample rates differ")
    if len(reference.samples) != len(estimate.samples):
        raise InvalidInputError("lengths differ")
    cfg = cfg or SpectralConfig()
    ref = np.log10(mel_spectrogram(reference, cfg) + 1e-10)
    est = np.log10(mel_spectrogram(estimate, cfg) + 1e-10)
    return float(np.mean(np.abs(ref - est)))


def snr_db(reference: AudioBuffer, estimate: AudioBuffer) -> float:
    """10 log10 of reference power over residual power."""
    if len(reference.samples) != len(estimate.samples):
        raise InvalidInputError("lengths differ")
    num = float(np.sum(reference.samples**2))
    den = float(np.sum((estimate.samples - reference.samples) ** 2))
    return 10.0 * np.log10(max(num, 1e-20) / max(den, 1e-20))


# ---------------------------------------------------------------------------
# External metric adapters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricAdapter:
    """External metric invoked per utterance as a subprocess.

    ``command`` entries may contain {ref} and {est} placeholders; the score is
    extracted from stdout by ``pattern`` (first capture group; defaults to the
    last float printed)."""

    name: str
    command: tuple
    pattern: str = ""
    timeout_seconds: float = 120.0

    def run(self, ref_path: Path, est_path: Path) -> float:
        argv = [part.format(ref=str(ref_path), est=str(est_path)) for part in self.command]
        proc = subprocess.run(
            argv, capture_output=True, text=True, timeout=self.timeout_seconds
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"adapter {self.name} exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        if self.pattern:
            match = re.search(self.pattern, proc.stdout)
            if not match:
                raise RuntimeError(f"adapter {self.name}: pattern not found in output")
            return float(match.group(1))
        numbers = re.findall(FLOAT_PATTERN, proc.stdout)
        if not numbers:
            raise RuntimeError(f"adapter {self.name}: no numeric output")
        return float(numbers[-1])


def adapters_from_config(section: dict) -> dict:
    """Builds name -> MetricAdapter from a config mapping like
    {pesq: {command: "pesq-tool {ref} {est}", pattern: "..."}}."""
    adapters = {}
    for name, spec in (section or {}).items():
        cmd = spec.get("command")
        if not cmd:
            raise ConfigError(f"metric adapter {name!r} has no command")
        command = tuple(shlex.split(cmd) if isinstance(cmd, str) else cmd)
        adapters[name] = MetricAdapter(
            name=name,
            command=command,
            pattern=spec.get("pattern", ""),
            timeout_seconds=float(spec.get("timeout_seconds", 120.0)),
        )
    return adapters


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    metrics: tuple
    rows: list = field(default_factory=list)  # {"stem": ..., metric: float | None}
    aggregates: dict = field(default_factory=dict)
    error_counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def finalize(self):
        for metric in self.metrics:
            values = [row[metric] for row in self.rows if row.get(metric) is not None]
            self.aggregates[metric] = float(np.mean(values)) if values else None
            self.error_counts[metric] = sum(1 for row in self.rows if row.get(metric) is None)
        return self


def _wav_stems(directory: Path) -> dict:
    return {p.stem: p for p in sorted(Path(directory).glob("*.wav"))}


def evaluate(ref_dir, est_dir, metrics=NATIVE_METRICS, degraded_dir=None, adapters=None, spectral_cfg=None) -> EvaluationReport:
    """Scores estimate files against references with matching stems.

    Native metrics are computed in-process; anything else must appear in
    ``adapters``.  snr_gain needs ``degraded_dir`` and is otherwise skipped
    with a warning.  Missing stems are listed in ``report.skipped``."""
    adapters = adapters or {}
    metrics = tuple(metrics)
    for metric in metrics:
        if metric not in NATIVE_METRICS and metric not in adapters:
            raise ConfigError(f"metric {metric!r} has no native implementation or adapter")
    if "snr_gain" in metrics and degraded_dir is None:
        log.warning("snr_gain requested without a degraded dir; omitting that column")
        metrics = tuple(m for m in metrics if m != "snr_gain")

    refs = _wav_stems(ref_dir)
    ests = _wav_stems(est_dir)
    degs = _wav_stems(degraded_dir) if degraded_dir else {}
    report = EvaluationReport(metrics=metrics)
    if not refs:
        raise InvalidInputError(f"no wav files under {ref_dir}")

    to_score = []
    for stem in sorted(refs):
        if stem not in ests or ("snr_gain" in metrics and stem not in degs):
            report.skipped.append(stem)
        else:
            to_score.append(stem)

    def score_one(stem: str) -> dict:
        row = {"stem": stem}
        try:
            ref = read_wav(refs[stem])
            est = read_wav(ests[stem])
            deg = read_wav(degs[stem]) if stem in degs else None
        except Exception as exc:  # corrupt file: mark every metric failed
            log.warning("failed to read pair %s: %s", stem, exc)
            row.update({m: None for m in metrics})
            return row
        for metric in metrics:
            try:
                if metric == "lsd":
                    row[metric] = log_spectral_distance(ref, est, spectral_cfg)
                elif metric == "mel_distance":
                    row[metric] = mel_distance(ref, est, spectral_cfg)
                elif metric == "snr_gain":
                    row[metric] = snr_db(ref, est) - snr_db(ref, deg)
                else:
                    row[metric] = adapters[metric].run(refs[stem], ests[stem])
            except Exception as exc:
                log.warning("metric %s failed on %s: %s", metric, stem, exc)
                row[metric] = None
        return row

    if to_score:
        # utterances are independent; map() keeps rows in stem order
        with ThreadPoolExecutor(max_workers=min(8, len(to_score))) as pool:
            report.rows = list(pool.map(score_one, to_score))
    return report.finalize()


def format_report(report: EvaluationReport) -> str:
    """Fixed-order TSV plus a commented summary block."""
    lines = ["\t".join(("stem",) + report.metrics)]
    for row in report.rows:
        cells = [row["stem"]]
        for metric in report.metrics:
            value = row.get(metric)
            cells.append("error" if value is None else f"{value:.6f}")
        lines.append("\t".join(cells))
    lines.append("")
    for metric in report.metrics:
        agg = report.aggregates.get(metric)
        lines.append(f"# mean\t{metric}\t{'n/a' if agg is None else f'{agg:.6f}'}")
        if report.error_counts.get(metric):
            lines.append(f"# errors\t{metric}\t{report.error_counts[metric]}")
    if report.skipped:
        lines.append(f"# skipped\t{','.join(report.skipped)}")
    lines.append("")
    return "\n".join(lines)


def write_report(report: EvaluationReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(report))
    return path
