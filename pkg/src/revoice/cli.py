"""Command-line entry point: degrade / train / finetune / enhance / evaluate /
demo subcommands over the library, with YAML config, deterministic seeding,
and 0/2/1 exit codes for success / partial / failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .adversarial import DiscriminatorBank
from .audio_core import AudioBuffer, read_wav, write_wav
from .degradation import AssetStore, DegradationConfig, item_seed, sample_recipe, degrade
from .diffusion import enhance, sampler_params, NoiseSchedule
from .errors import ConfigError, InvalidInputError, RevoiceError
from .evaluate import adapters_from_config, evaluate, format_report, write_report
from .lora import (
    FinetuneWeights,
    TemplatePhonemePredictor,
    adapter_parameters,
    finetune_step,
    inject_lora,
    merge_lora,
)
from .trainer import (
    SegmentSampler,
    Trainer,
    checkpoint_load,
    checkpoint_save,
    desk_preset,
    load_enhancement_model,
    paper_preset,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
    return loaded


def _dataclass_overrides(cls, section: dict, base=None):
    """Construct a dataclass from defaults (or `base`) plus config overrides."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    fields = dataclasses.asdict(base) if base is not None else {}
    fields.update(section)
    tupled = {
        k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
        for k, v in fields.items()
    }
    return cls(**tupled)


def _load_pairs(clean_dir, degraded_dir, sample_rate):
    """Matching-stem (clean, degraded) tensors of shape (1, T)."""
    cleans = {p.stem: p for p in sorted(Path(clean_dir).glob("*.wav"))}
    degradeds = {p.stem: p for p in sorted(Path(degraded_dir).glob("*.wav"))}
    stems = sorted(set(cleans) & set(degradeds))
    if not stems:
        raise InvalidInputError(f"no matching wav stems between {clean_dir} and {degraded_dir}")
    pairs = []
    for stem in stems:
        c = read_wav(cleans[stem])
        d = read_wav(degradeds[stem])
        if c.sample_rate != sample_rate or d.sample_rate != sample_rate:
            raise InvalidInputError(
                f"{stem}: expected {sample_rate} Hz, got {c.sample_rate}/{d.sample_rate}"
            )
        n = min(len(c.samples), len(d.samples))
        pairs.append(
            (
                torch.from_numpy(c.samples[:n]).float().unsqueeze(0),
                torch.from_numpy(d.samples[:n]).float().unsqueeze(0),
            )
        )
    return stems, pairs


def _preset_from_args(args, config) -> "ExperimentPreset":
    preset = paper_preset() if getattr(args, "preset", "desk") == "paper" else desk_preset()
    train_cfg = _dataclass_overrides(type(preset.train), config.get("train", {}), base=preset.train)
    if getattr(args, "steps", None):
        train_cfg = dataclasses.replace(
            train_cfg,
            total_steps=args.steps,
            decay_end=min(train_cfg.decay_end, args.steps),
            decay_start=min(train_cfg.decay_start, args.steps),
            warmup_steps=min(train_cfg.warmup_steps, args.steps),
        )
    if getattr(args, "loss", None):
        train_cfg = dataclasses.replace(train_cfg, loss_mode=args.loss)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return dataclasses.replace(preset, train=train_cfg)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_degrade(args, config) -> int:
    out_dir = Path(args.out_dir)
    wav_out = out_dir / "degraded"
    wav_out.mkdir(parents=True, exist_ok=True)
    deg_cfg = _dataclass_overrides(DegradationConfig, config.get("degradation", {}))
    assets = AssetStore(noise_dir=args.noise_dir, rir_dir=args.rir_dir)
    files = sorted(Path(args.clean_dir).glob("*.wav"))
    if not files:
        raise InvalidInputError(f"no wav files under {args.clean_dir}")
    manifest, failures = {}, []
    for index, path in enumerate(files):
        try:
            clean = read_wav(path)
            recipe = sample_recipe(item_seed(args.seed, index), deg_cfg, assets)
            degraded, entry = degrade(clean, recipe, assets)
            write_wav(wav_out / path.name, degraded)
            manifest[path.stem] = entry
        except RevoiceError as exc:
            log.error("degrade failed on %s: %s", path.name, exc)
            failures.append(path.stem)
    (out_dir / "degradation_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"degraded {len(manifest)}/{len(files)} files -> {wav_out}")
    if failures:
        print(f"failed: {', '.join(failures)}", file=sys.stderr)
        return 1 if not manifest else 2
    return 0


def cmd_train(args, config) -> int:
    preset = _preset_from_args(args, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems, pairs = _load_pairs(args.clean_dir, args.degraded_dir, preset.sample_rate)
    sampler = SegmentSampler(pairs, preset.sample_rate, preset.train.segment_seconds, preset.train.seed)
    trainer = Trainer(preset)
    if args.resume:
        checkpoint_load(args.resume, trainer)
        print(f"resumed from {args.resume} at step {trainer.step}")
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a") as fh:
        while trainer.step < preset.train.total_steps:
            clean, degraded = sampler.batch(trainer.step, preset.train.batch_size)
            record = trainer.train_step(clean, degraded)
            fh.write(json.dumps(record) + "\n")
            if record["step"] % args.log_every == 0:
                print(
                    f"step {record['step']:6d} lr {record['lr']:.2e} "
                    + " ".join(f"{k} {v:.4f}" for k, v in record.items() if isinstance(v, float) and k != "lr")
                )
            if args.checkpoint_every and trainer.step % args.checkpoint_every == 0:
                checkpoint_save(trainer, out_dir / f"{trainer.step}.ckpt")
    final = checkpoint_save(trainer, out_dir / f"{trainer.step}.ckpt")
    print(f"trained {len(stems)} utterances for {trainer.step} steps -> {final}")
    return 0


def cmd_finetune(args, config) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = torch.load(Path(args.checkpoint), map_location="cpu", weights_only=False)
    if "disc" not in payload:
        raise ConfigError("finetune needs an adversarially trained checkpoint (no discriminator state found)")
    model, preset = load_enhancement_model(args.checkpoint, use_ema=True)
    discs = DiscriminatorBank(preset.disc)
    discs.load_state_dict(payload["disc"])
    discs.requires_grad_(False)
    discs.eval()

    for p in model.cond_net.parameters():
        p.requires_grad_(False)
    for p in model.score_net.parameters():
        p.requires_grad_(False)
    _, adapter_c = inject_lora(model.cond_net, rank=args.rank)
    _, adapter_s = inject_lora(model.score_net, rank=args.rank)
    n_trainable = adapter_c.parameter_count + adapter_s.parameter_count
    print(f"injected rank-{args.rank} adapters: {len(adapter_c.layers) + len(adapter_s.layers)} layers, {n_trainable} trainable parameters")

    stems, pairs = _load_pairs(args.clean_dir, args.degraded_dir, preset.sample_rate)
    seed = args.seed if args.seed is not None else 0
    sampler = SegmentSampler(pairs, preset.sample_rate, args.segment_seconds, seed)
    predictor = TemplatePhonemePredictor(preset.sample_rate)
    params = list(adapter_parameters(model.cond_net)) + list(adapter_parameters(model.score_net))
    optimizer = torch.optim.AdamW(params, lr=args.lr, betas=(0.9, 0.99), weight_decay=0.01)
    sampler_cfg = preset.sampler_config()
    weights = FinetuneWeights()
    log_path = out_dir / "finetune_log.jsonl"
    with open(log_path, "a") as fh:
        for step in range(args.steps):
            clean, degraded = sampler.batch(step, args.batch)
            gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))
            record = finetune_step(
                degraded, clean, model, discs, predictor, sampler_cfg, weights, optimizer, gen, preset.sample_rate
            )
            record["step"] = step
            fh.write(json.dumps(record) + "\n")
            if step % args.log_every == 0:
                print(f"step {step:5d} " + " ".join(f"{k} {v:.4f}" for k, v in record.items() if isinstance(v, float)))

    adapter_state = {
        "format_version": 1,
        "kind": "lora_adapters",
        "rank": args.rank,
        "layers": {"cond": adapter_c.layers, "score": adapter_s.layers},
        "state": {
            "cond": {k: v for k, v in model.cond_net.state_dict().items() if "lora_" in k},
            "score": {k: v for k, v in model.score_net.state_dict().items() if "lora_" in k},
        },
    }
    adapter_path = out_dir / "adapters.ckpt"
    torch.save(adapter_state, adapter_path)
    print(f"fine-tuned on {len(stems)} utterances for {args.steps} steps -> {adapter_path}")

    if args.merged_export:
        merge_lora(model.cond_net)
        merge_lora(model.score_net)
        merged = {
            "config": payload["config"],
            "step": payload["step"],
            "model": {"cond": model.cond_net.state_dict(), "score": model.score_net.state_dict()},
            "ema": {
                "decay": payload["ema"]["decay"],
                "step": payload["ema"]["step"],
                "shadow": {
                    **{f"cond.{k}": v for k, v in model.cond_net.state_dict().items()},
                    **{f"score.{k}": v for k, v in model.score_net.state_dict().items()},
                },
            },
        }
        merged_path = out_dir / "merged.ckpt"
        torch.save(merged, merged_path)
        print(f"merged export -> {merged_path}")
    return 0


def cmd_enhance(args, config) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, preset = load_enhancement_model(args.checkpoint, use_ema=not args.no_ema)
    steps = args.sampler_steps or preset.sampler_steps
    cfg = sampler_params(
        NoiseSchedule(sigma_data=preset.arch.sigma_data), steps, preset.sampler_epsilon
    )
    files = sorted(Path(args.in_dir).glob("*.wav"))
    if not files:
        raise InvalidInputError(f"no wav files under {args.in_dir}")
    seed = args.seed if args.seed is not None else 0
    done, failures = 0, []
    for index, path in enumerate(files):
        try:
            noisy = read_wav(path)
            if noisy.sample_rate != preset.sample_rate:
                raise InvalidInputError(
                    f"model expects {preset.sample_rate} Hz, file is {noisy.sample_rate} Hz; resample first"
                )
            out = enhance(noisy, model, cfg, seed=item_seed(seed, index))
            write_wav(out_dir / path.name, out)
            done += 1
        except RevoiceError as exc:
            log.error("enhance failed on %s: %s", path.name, exc)
            failures.append(path.stem)
    print(f"enhanced {done}/{len(files)} files -> {out_dir}")
    if failures:
        print(f"failed: {', '.join(failures)}", file=sys.stderr)
        return 1 if not done else 2
    return 0


def cmd_evaluate(args, config) -> int:
    adapters = adapters_from_config(config.get("metrics", {}))
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    report = evaluate(
        args.ref_dir,
        args.est_dir,
        metrics=metrics,
        degraded_dir=args.degraded_dir,
        adapters=adapters,
    )
    text = format_report(report)
    print(text, end="")
    if args.out_dir:
        write_report(report, Path(args.out_dir) / "report.tsv")
    scored = [r for r in report.rows if any(r.get(m) is not None for m in report.metrics)]
    if not scored:
        print("no utterances scored", file=sys.stderr)
        return 1
    had_errors = any(r.get(m) is None for r in report.rows for m in report.metrics)
    return 2 if (report.skipped or had_errors) else 0


def cmd_demo(args, config) -> int:
    from .synth import build_demo_corpus

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    t0 = time.monotonic()
    stage = "synth"
    try:
        dirs = build_demo_corpus(out_dir / "data", num_utterances=args.utterances, seed=seed, sample_rate=8000)
        print(f"[{time.monotonic() - t0:6.1f}s] synthesized {args.utterances} utterances")

        stage = "degrade"
        degrade_args = argparse.Namespace(
            clean_dir=dirs["clean"], noise_dir=dirs["noise"], rir_dir=dirs["rir"],
            out_dir=out_dir, seed=seed,
        )
        rc = cmd_degrade(degrade_args, config)
        if rc != 0:
            raise RevoiceError("degradation stage failed")
        print(f"[{time.monotonic() - t0:6.1f}s] degraded corpus")

        ckpt = args.checkpoint
        if not args.skip_train:
            stage = "train"
            train_args = argparse.Namespace(
                clean_dir=dirs["clean"], degraded_dir=out_dir / "degraded",
                out_dir=out_dir / "checkpoints", preset="desk", steps=args.steps,
                loss=None, seed=seed, resume=None, checkpoint_every=0, log_every=100,
            )
            rc = cmd_train(train_args, config)
            if rc != 0:
                raise RevoiceError("training stage failed")
            ckpts = sorted((out_dir / "checkpoints").glob("*.ckpt"), key=lambda p: int(p.stem))
            ckpt = ckpts[-1]
            print(f"[{time.monotonic() - t0:6.1f}s] trained -> {ckpt}")
        elif ckpt is None:
            raise ConfigError("--skip-train requires --checkpoint")

        stage = "enhance"
        enhance_args = argparse.Namespace(
            checkpoint=ckpt, in_dir=out_dir / "degraded", out_dir=out_dir / "enhanced",
            no_ema=False, sampler_steps=None, seed=seed,
        )
        rc = cmd_enhance(enhance_args, config)
        if rc != 0:
            raise RevoiceError("enhancement stage failed")
        print(f"[{time.monotonic() - t0:6.1f}s] enhanced")

        stage = "evaluate"
        enhanced_report = evaluate(dirs["clean"], out_dir / "enhanced", metrics=("lsd",))
        degraded_report = evaluate(dirs["clean"], out_dir / "degraded", metrics=("lsd",))
        write_report(enhanced_report, out_dir / "report_enhanced.tsv")
        write_report(degraded_report, out_dir / "report_degraded.tsv")
        lsd_enh = enhanced_report.aggregates["lsd"]
        lsd_deg = degraded_report.aggregates["lsd"]
        print(f"[{time.monotonic() - t0:6.1f}s] LSD degraded {lsd_deg:.3f} dB -> enhanced {lsd_enh:.3f} dB")

        stage = "verify"
        if lsd_enh is None or lsd_deg is None or not lsd_enh < lsd_deg:
            raise RevoiceError(
                f"demo verification failed: enhanced LSD {lsd_enh} not below degraded LSD {lsd_deg}"
            )
        print(f"demo complete in {time.monotonic() - t0:.1f}s -> {out_dir}")
        return 0
    except RevoiceError as exc:
        print(f"demo failed at stage {stage!r}: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="YAML config file")
    shared.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    shared.add_argument("--out-dir", required=True, help="output directory (all writes go here)")

    parser = argparse.ArgumentParser(prog="revoice", description="Universal speech enhancement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[shared], help="apply random degradation chains")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--rir-dir", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", parents=[shared], help="main-stage training")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--degraded-dir", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--steps", type=int, default=None, help="override total steps")
    p.add_argument("--loss", choices=("adversarial", "mdn"), default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[shared], help="LoRA adaptation of a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--degraded-dir", required=True)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--segment-seconds", type=float, default=4.0)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--merged-export", action="store_true", help="also export a merged full checkpoint")
    p.add_argument("--log-every", type=int, default=20)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("enhance", parents=[shared], help="run the diffusion enhancer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--no-ema", action="store_true", help="use raw weights instead of the EMA shadow")
    p.add_argument("--sampler-steps", type=int, default=None)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", parents=[shared], help="score estimates against references")
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--est-dir", required=True)
    p.add_argument("--degraded-dir", default=None, help="needed for snr_gain")
    p.add_argument("--metrics", default="lsd,mel_distance,snr_gain")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", parents=[shared], help="synthetic end-to-end pipeline")
    p.add_argument("--utterances", type=int, default=4)
    p.add_argument("--steps", type=int, default=None, help="override training steps")
    p.add_argument("--skip-train", action="store_true")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = 0
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except RevoiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
