"""Command line entry point: ``styler <command> [options]``.

Exit codes: 0 success, 1 unreadable input, 2 configuration or usage error,
3 training diverged.  Human messages go to stderr; ``--json`` prints a
machine-readable summary on stdout.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from styler import AUDIO_FACTORS
from styler.config import ModelConfig, TrainConfig
from styler.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InvalidInput,
    TrainingDiverged,
    UnknownSpeaker,
)

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("styler")


def _run_dir(args):
    return Path(args.run_dir or os.environ.get("STYLER_RUN_DIR") or ".")


def _path(args, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else _run_dir(args) / p


def _emit(args, summary):
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=str))


def _fail(code, msg):
    print(f"styler: {msg}", file=sys.stderr)
    return code


def cmd_preprocess(args):
    from styler.pipeline import preprocess

    corpus = _path(args, args.corpus)
    if not corpus.is_dir() or not (corpus / "annotations.jsonl").is_file():
        return _fail(EXIT_IO, f"cannot read corpus at {corpus}")
    noise = _path(args, args.noise)
    if args.augment and (noise is None or not noise.is_dir()):
        return _fail(EXIT_CONFIG, "--augment requires an existing --noise directory")
    try:
        summary = preprocess(
            corpus, _path(args, args.out), noise_dir=noise, augment=args.augment,
            cfg=_model_config(args), seed=args.seed, force=args.force,
        )
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, DataError) as exc:
        return _fail(EXIT_IO, str(exc))
    print(
        f"preprocessed {summary['entries']} utterances ({summary['bundles']} bundles), "
        f"rejected {summary['rejected']}",
        file=sys.stderr,
    )
    for r in summary["rejections"]:
        print(f"  rejected {r['utt_id']}: {r['reason']}", file=sys.stderr)
    _emit(args, summary)
    return EXIT_OK


def _model_config(args):
    overrides = {}
    if getattr(args, "config", None):
        with open(_path(args, args.config), encoding="utf-8") as fh:
            overrides = json.load(fh)
    if getattr(args, "small", False):
        return ModelConfig.small(**overrides)
    return ModelConfig(**overrides)


def cmd_train(args):
    from styler.model import Styler
    from styler.pipeline import FeatureDataset, Trainer, seed_everything

    manifest = _path(args, args.manifest)
    if not manifest.is_file():
        return _fail(EXIT_IO, f"manifest {manifest} not found")
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.resume:
            from styler.pipeline import load_checkpoint

            state = load_checkpoint(_path(args, args.resume))
            cfg = state["model"].cfg
            dataset = FeatureDataset(manifest, split="train", cfg=cfg)
            trainer = Trainer.resume(_path(args, args.resume), dataset, state["train_config"])
        else:
            cfg = _model_config(args)
            dataset = FeatureDataset(manifest, split="train", cfg=cfg)
            cfg = cfg.replace(n_symbols=max(cfg.n_symbols, len(dataset.symbols)))
            seed_everything(args.seed)
            tcfg = TrainConfig(
                batch_size=args.batch_size,
                warmup_steps=args.warmup,
                seed=args.seed,
                noise_modeling=not args.no_noise_modeling,
                augment_probability=args.augment_probability,
            )
            trainer = Trainer(Styler(cfg, dataset.speakers), dataset, tcfg)
    except (ConfigError, CheckpointError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, DataError) as exc:
        return _fail(EXIT_IO, str(exc))

    last_good = {"path": None}

    def save(step):
        p = out / f"ckpt_{step:07d}.zip"
        trainer.save(p)
        last_good["path"] = str(p)

    def on_step(rec):
        if args.ckpt_every and rec["step"] % args.ckpt_every == 0:
            save(rec["step"])

    start = trainer.step
    try:
        history = trainer.fit(args.steps, log_path=out / "loss_log.jsonl", on_step=on_step)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, f"training diverged at step {trainer.step + 1}: {exc}; "
                     f"last good checkpoint: {last_good['path']}")
    if not args.ckpt_every or trainer.step % args.ckpt_every:
        save(trainer.step)
    summary = {
        "start_step": start,
        "step": trainer.step,
        "checkpoint": last_good["path"],
        "final": history[-1] if history else None,
        "log": str(out / "loss_log.jsonl"),
    }
    print(f"trained steps {start}..{trainer.step}; checkpoint {last_good['path']}", file=sys.stderr)
    if args.plot and history:
        from styler.plotting import plot_loss_curves

        plot_loss_curves(out / "loss.png", history)
        summary["plot"] = str(out / "loss.png")
    _emit(args, summary)
    return EXIT_OK


def _synthesizer(args):
    from styler.inference import Synthesizer

    ckpt = _path(args, args.ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    return Synthesizer(ckpt)


def cmd_synthesize(args):
    from styler.inference import parse_masks, write_outputs

    torch.manual_seed(args.seed)
    try:
        masks = parse_masks(args.mask)
        synth = _synthesizer(args)
        refs = {}
        cache = {}
        for f in AUDIO_FACTORS:
            path = getattr(args, f"ref_{f}") or args.ref
            if path is None:
                continue
            path = _path(args, path)
            if path not in cache:
                cache[path] = synth.reference(path, args.ref_speaker)
            refs[f] = cache[path][f]
        needed = [f for f in AUDIO_FACTORS if f not in masks and (f != "noise" or args.render_noise)]
        missing = [f for f in needed if f not in refs]
        if missing:
            return _fail(EXIT_CONFIG, f"no reference for unmasked factor(s): {', '.join(missing)}")
        out = synth.run(args.text, refs, speaker=args.speaker, masks=masks, render_noise=args.render_noise)
        files = write_outputs(out, _path(args, args.out), synth.cfg, wav=args.wav, plot=args.plot,
                              title=args.text, seed=args.seed)
    except FileNotFoundError as exc:
        return _fail(EXIT_IO, str(exc))
    except (InvalidInput, DataError, ConfigError, CheckpointError, UnknownSpeaker) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    summary = {"frames": int(out.mel.shape[0]), "durations": out.durations.tolist(),
               "masked": sorted(masks), "noise_decoding": bool(args.render_noise), **files}
    _emit(args, summary)
    return EXIT_OK


def cmd_ablate(args):
    from styler.inference import run_ablation

    torch.manual_seed(args.seed)
    try:
        synth = _synthesizer(args)
        rows = run_ablation(synth, args.text, _path(args, args.ref), _path(args, args.out),
                            speaker=args.speaker, ref_speaker=args.ref_speaker)
    except FileNotFoundError as exc:
        return _fail(EXIT_IO, str(exc))
    except (InvalidInput, DataError, ConfigError, CheckpointError, UnknownSpeaker) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    print(f"wrote {len(rows)} ablation cells to {_path(args, args.out)}", file=sys.stderr)
    _emit(args, {"cells": rows, "index": str(_path(args, args.out) / "index.md")})
    return EXIT_OK


def cmd_toy_corpus(args):
    from styler.toy import make_toy_corpus

    speakers = args.speakers.split(",")
    out = make_toy_corpus(_path(args, args.out), speakers=speakers, utts_per_speaker=args.utts,
                          seed=args.seed)
    _emit(args, {"corpus": str(out)})
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=1234)
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("--run-dir", help="base for relative paths (default $STYLER_RUN_DIR or cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="styler", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", parents=[common], help="extract features and write the manifest")
    pp.add_argument("--corpus", required=True)
    pp.add_argument("--noise")
    pp.add_argument("--out", required=True)
    pp.add_argument("--augment", action="store_true")
    pp.add_argument("--force", action="store_true")
    pp.set_defaults(func=cmd_preprocess)

    pt = sub.add_parser("train", parents=[common], help="train from a manifest")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--steps", type=int, default=1000, help="steps to run (added to a resumed count)")
    pt.add_argument("--batch-size", type=int, default=16)
    pt.add_argument("--ckpt-every", type=int, default=0)
    pt.add_argument("--resume")
    pt.add_argument("--no-noise-modeling", action="store_true")
    pt.add_argument("--out", default="checkpoints")
    pt.add_argument("--warmup", type=int, default=4000)
    pt.add_argument("--augment-probability", type=float, default=0.5)
    pt.add_argument("--small", action="store_true", help="reduced widths (hidden 64)")
    pt.add_argument("--config", help="JSON file of ModelConfig overrides")
    pt.add_argument("--plot", action="store_true", help="write a loss curve PNG")
    pt.set_defaults(func=cmd_train)

    ps = sub.add_parser("synthesize", parents=[common], help="synthesize with per-factor references")
    ps.add_argument("--ckpt", required=True)
    ps.add_argument("--text", required=True, help="space-separated phonemes, or @file")
    ps.add_argument("--ref", help="default reference audio for every factor")
    for f in AUDIO_FACTORS:
        ps.add_argument(f"--ref-{f}", help=f"reference audio for the {f} factor")
    ps.add_argument("--ref-speaker", help="speaker id of the references (pitch normalisation)")
    ps.add_argument("--speaker", help="speaker id or .npy/.styf embedding file")
    ps.add_argument("--mask", help="comma-separated factors to exclude")
    ps.add_argument("--render-noise", action="store_true")
    ps.add_argument("--wav", action="store_true")
    ps.add_argument("--plot", action="store_true")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synthesize)

    pa = sub.add_parser("ablate", parents=[common], help="factor-exclusion grid for one reference")
    pa.add_argument("--ckpt", required=True)
    pa.add_argument("--ref", required=True)
    pa.add_argument("--text", required=True)
    pa.add_argument("--speaker")
    pa.add_argument("--ref-speaker")
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_ablate)

    pz = sub.add_parser("toy-corpus", parents=[common], help="write a synthetic demo corpus")
    pz.add_argument("--out", required=True)
    pz.add_argument("--speakers", default="spk_a,spk_b")
    pz.add_argument("--utts", type=int, default=2)
    pz.set_defaults(func=cmd_toy_corpus)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed % (2**32))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
