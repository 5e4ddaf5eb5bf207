"""Command-line entry point: ``hyperspotter <command> ...``.

Exit codes: 0 success (for ``detect``: keyword detected), 1 ``detect`` below
threshold, 2 usage or config error, 3 I/O or file-format error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import dataset, desk, encoder, frontend, hypernet, metrics, text, trainer
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import DESK, DESK_TRAIN, PAPER, ModelConfig, TrainConfig
from .detector import detect, export_attention
from .numerics import NumericalError

log = logging.getLogger("hyperspotter")

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4

FORMATS = """file formats:
  HSKW0001  keyword filter: magic | u16 version | u16 K | u16 C | u32 keyword bytes |
            UTF-8 keyword | C*K float32 LE | CRC32
  HSCK0001  checkpoint: magic | u32 header len | JSON header | u32 record count |
            named float32/float64 records | CRC32
  HSFEAT01  external features: magic | u32 B | u32 M | B*M float32 LE
  manifests are JSONL: {"audio", "text", optional "words": [{"w","start","end"}],
            optional "offset"/"duration"}; score files are CSV clip_id,keyword,label,score
"""


class UsageError(Exception):
    pass


class PretrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    epochs: int = Field(250, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(96, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)


class RunConfig(BaseModel):
    """JSON run document; command-line flags override its fields."""
    model_config = ConfigDict(extra="forbid", frozen=True)
    preset: Literal["desk", "paper"] = "desk"
    model: Optional[ModelConfig] = None
    train: TrainConfig = DESK_TRAIN
    pretrain: PretrainSettings = PretrainSettings(lr=3e-3, batch_size=8, max_steps=400)
    seed: int = 0

    def resolved_model(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        return DESK if self.preset == "desk" else PAPER


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"--config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: invalid JSON ({exc})") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise UsageError(f"--config {path}: {exc}") from exc


def _train_config(run: RunConfig, args) -> TrainConfig:
    updates = {}
    for flag, key in [("lr", "lr"), ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
                      ("patience", "patience"), ("max_steps", "max_steps"),
                      ("max_span_words", "max_span_words")]:
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "freeze_encoder", None) is not None:
        updates["freeze_encoder"] = args.freeze_encoder
    updates["seed"] = args.seed if args.seed is not None else run.seed
    try:
        return TrainConfig.model_validate({**run.train.model_dump(), **updates})
    except ValidationError as exc:
        raise UsageError(str(exc)) from exc


def _manifest(path: str, flag: str) -> list[dataset.ManifestEntry]:
    try:
        entries = dataset.load_manifest(path)
    except OSError as exc:
        raise OSError(f"{flag} {path}: {exc.strerror}") from exc
    if not entries:
        raise ValueError(f"{flag} {path}: manifest is empty")
    return entries


def _segmented(entries):
    return [part for e in entries for part in dataset.segment(e)]


# -- commands -----------------------------------------------------------------------------------

def cmd_synth_corpus(args, run: RunConfig) -> int:
    seed = args.seed if args.seed is not None else run.seed
    out = Path(args.out)
    if args.words:
        words = [w for w in args.words.split(",") if w]
        held: list[str] = []
    else:
        words, held = dataset.split_vocabulary(args.n_words, args.held_out, seed)
    dataset.synth_corpus(out, args.clips, words, seed=seed, name="train.jsonl")
    print(f"wrote {args.clips} clips over {len(words)} words to {out / 'train.jsonl'}")
    if args.val_clips:
        dataset.synth_corpus(out, args.val_clips, words, seed=seed + 1, name="val.jsonl")
        print(f"wrote {args.val_clips} clips to {out / 'val.jsonl'}")
    if held:
        dataset.synth_corpus(out, args.held_clips, held, seed=seed + 2, name="held.jsonl")
        print(f"wrote {args.held_clips} clips over held-out words {held} to {out / 'held.jsonl'}")
    if args.pretrain_clips:
        pre = desk.pretrain_vocabulary(words + held, seed=seed)
        dataset.synth_corpus(out, args.pretrain_clips, pre, seed=seed + 3, name="pretrain.jsonl")
        print(f"wrote {args.pretrain_clips} CTC pretraining clips to {out / 'pretrain.jsonl'}")
    (out / "vocabulary.json").write_text(json.dumps({"train": words, "held": held}, indent=1) + "\n")
    return EXIT_OK


def cmd_pretrain_ctc(args, run: RunConfig) -> int:
    cfg = run.resolved_model()
    seed = args.seed if args.seed is not None else run.seed
    settings = run.pretrain.model_copy(update={k: v for k, v in {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "max_steps": args.max_steps}.items() if v is not None})
    entries = _segmented(_manifest(args.manifest, "--manifest"))
    feats = trainer.FeatureCache()
    utterances = [(feats(e), text.encode_chars(e.text)) for e in entries]
    res = encoder.pretrain_ctc(utterances, cfg.encoder, settings.epochs, settings.lr,
                               settings.batch_size, seed, max_steps=settings.max_steps)
    if not np.isfinite(res.losses[-1]):
        raise trainer.DivergenceError("CTC loss diverged")
    params = trainer.init_model(cfg, seed)
    params.update(res.params)
    save_checkpoint(args.out, Checkpoint(params, cfg, extra={"ctc_losses": res.losses}))
    print(f"ctc loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} over {len(res.losses)} steps; "
          f"wrote {args.out}")
    return EXIT_OK


def _report_epoch(rec: trainer.TrainRecord) -> None:
    log.info("epoch %d train_loss %.4f val_loss %.4f", rec.epoch, rec.train_loss, rec.val_loss)


def cmd_train(args, run: RunConfig) -> int:
    tc = _train_config(run, args)
    train_entries = _segmented(_manifest(args.train, "--train"))
    val_entries = _segmented(_manifest(args.val, "--val")) if args.val else []
    params = None
    cfg = run.resolved_model()
    if args.init:
        init = load_checkpoint(args.init)
        cfg = init.model_config
        params = trainer.init_model(cfg, tc.seed)
        params.update(trainer.group(init.params, "encoder"))
    res = trainer.train(train_entries, val_entries, cfg, tc, params=params, on_epoch=_report_epoch)
    save_checkpoint(args.out, res.checkpoint)
    if args.log:
        trainer.write_log(args.log, res.history, timing=not args.no_timing)
    print(f"best epoch {res.best_epoch} val_loss {res.checkpoint.val_loss:.4f} "
          f"after {res.steps} steps; wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args, run: RunConfig) -> int:
    tc = _train_config(run, args)
    ckpt = load_checkpoint(args.checkpoint)
    entries = _segmented(_manifest(args.manifest, "--manifest"))
    val_entries = _segmented(_manifest(args.val, "--val")) if args.val else []
    res = trainer.finetune(ckpt, entries, tc, val_entries)
    save_checkpoint(args.out, res.checkpoint)
    if args.log:
        trainer.write_log(args.log, res.history, timing=not args.no_timing)
    print(f"fine-tuned {res.steps} steps; wrote {args.out}")
    return EXIT_OK


def cmd_gen_weights(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint, include=("hypernet.",))
    try:
        filt = hypernet.generate_weights(args.keyword, ckpt.params, ckpt.model_config.hypernet)
    except text.CharsetError as exc:
        raise UsageError(f"--keyword: {exc}") from exc
    hypernet.write_filter(args.out, filt)
    print(f"wrote {filt.channels}x{filt.kernel} filter for {filt.keyword!r} to {args.out}")
    return EXIT_OK


def _detect_clip(audio: str, filter_path: str, checkpoint: str):
    """Load only encoder + detector parameters and the filter file; never the hypernet."""
    ckpt = load_checkpoint(checkpoint, include=("encoder.", "detector."))
    filt = hypernet.read_filter(filter_path)
    cfg = ckpt.model_config
    clip = frontend.load_wav(audio)
    z = encoder.encode(frontend.log_mel(clip), cfg.encoder, ckpt.params)
    return detect(z, filt, ckpt.params, cfg.detector), filt


def cmd_detect(args, run: RunConfig) -> int:
    out, filt = _detect_clip(args.audio, args.filter, args.checkpoint)
    p = out.probability
    print(f"{p:.6f}")
    return EXIT_OK if p >= args.threshold else EXIT_NEGATIVE


def cmd_export_attention(args, run: RunConfig) -> int:
    out, _ = _detect_clip(args.audio, args.filter, args.checkpoint)
    layer = args.layer if args.layer >= 0 else len(out.cross_attention) + args.layer
    try:
        csv_path, pgm_path = export_attention(out, layer, args.out)
    except IndexError as exc:
        raise UsageError(f"--layer: {exc}") from exc
    print(f"probability {out.probability:.6f}; wrote {csv_path} and {pgm_path}")
    return EXIT_OK


def cmd_evaluate(args, run: RunConfig) -> int:
    if args.scores:
        rows = metrics.read_scores(args.scores)
        s = metrics.scored_set(rows)
        results = {"all": metrics.report(s, threshold=args.threshold)}
    else:
        if not (args.manifest and args.checkpoint):
            raise UsageError("evaluate needs --manifest and --checkpoint (or --scores)")
        ckpt = load_checkpoint(args.checkpoint)
        entries = _segmented(_manifest(args.manifest, "--manifest"))
        seed = args.seed if args.seed is not None else run.seed
        transform = None
        if args.snr is not None:
            transform = trainer.noise_transform(args.noise, args.snr, seed)
        model = trainer.Model(ckpt.model_config, ckpt.params)
        ev = trainer.evaluate_entries(entries, model, trainer.FeatureCache(transform),
                                      args.batch_size, args.max_span_words or dataset.MAX_SPAN_WORDS)
        results = ev.report(args.threshold)
        s = metrics.ScoredSet(ev.scores, ev.labels)
        if args.scores_out:
            metrics.write_scores(args.scores_out, [
                metrics.ScoreRow(p.clip_id, p.keyword, p.label, float(v))
                for p, v in zip(ev.pairs, ev.scores)])
    metrics.write_report(args.out, results)
    if args.roc:
        metrics.write_roc(args.roc, s)
    for name, value in results["all"].items():
        print(f"{name} {value:.2f}")
    return EXIT_OK


def cmd_mix_noise(args, run: RunConfig) -> int:
    seed = args.seed if args.seed is not None else run.seed
    clean = frontend.load_wav(args.audio)
    noise = frontend.load_noise(args.noise, clean.duration, seed)
    mixed = frontend.mix_noise(clean, noise, args.snr, np.random.default_rng(seed))
    frontend.write_wav(args.out, mixed)
    print(f"wrote {args.out} at {args.snr:g} dB SNR")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-span-words", type=int, help="longest positive keyword span (1-4 words)")
    p.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction, default=None,
                   help="keep encoder parameters fixed (the desk preset freezes by default)")
    p.add_argument("--log", help="write the per-epoch loss CSV here")
    p.add_argument("--no-timing", action="store_true",
                   help="leave the elapsed_s column empty so logs compare byte-for-byte")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperspotter", description="Open-vocabulary keyword spotting with hypernetwork-"
        "generated matched filters.", epilog=FORMATS,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON run config (validated; unknown keys rejected)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("synth-corpus", cmd_synth_corpus, "write a tone-word corpus with exact alignments")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=32)
    p.add_argument("--words", help="comma-separated vocabulary (default: generated)")
    p.add_argument("--n-words", type=int, default=8)
    p.add_argument("--held-out", type=int, default=4, help="extra words kept out of train.jsonl")
    p.add_argument("--held-clips", type=int, default=64)
    p.add_argument("--val-clips", type=int, default=0)
    p.add_argument("--pretrain-clips", type=int, default=0,
                   help="also write pretrain.jsonl over other pseudo-words, for pretrain-ctc")

    p = add("pretrain-ctc", cmd_pretrain_ctc, "pretrain the speech encoder with CTC; writes HSCK0001")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)

    p = add("train", cmd_train, "train hypernet + detector (and encoder unless frozen) with BCE")
    p.add_argument("--train", required=True, help="training manifest (JSONL)")
    p.add_argument("--val", help="validation manifest; defaults to training loss for stopping")
    p.add_argument("--init", help="checkpoint whose encoder parameters start training")
    p.add_argument("--out", required=True)
    _train_flags(p)

    p = add("finetune", cmd_finetune, "one extra epoch on a second manifest, fresh optimizer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    _train_flags(p)

    p = add("gen-weights", cmd_gen_weights, "generate an HSKW0001 keyword filter offline")
    p.add_argument("--keyword", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = add("detect", cmd_detect, "score one WAV against a filter file; exit 0 if detected, 1 if not")
    p.add_argument("--audio", required=True)
    p.add_argument("--filter", required=True, help="HSKW0001 file from gen-weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("evaluate", cmd_evaluate, "AUC/EER/F1/FRR@FAR5%% over a manifest; metric + ROC CSVs")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--scores", help="score external detections instead (clip_id,keyword,label,score)")
    p.add_argument("--scores-out", help="also write per-pair scores")
    p.add_argument("--out", required=True, help="metric CSV (subset,metric,value)")
    p.add_argument("--roc", help="ROC CSV (threshold,far,frr)")
    p.add_argument("--snr", type=float, help="mix noise at this SNR (dB) before scoring")
    p.add_argument("--noise", default="white", help="white, pub, or a WAV path")
    p.add_argument("--threshold", type=float, default=0.5, help="F1 decision threshold")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-span-words", type=int)

    p = add("export-attention", cmd_export_attention, "write a cross-attention map as CSV + PGM")
    p.add_argument("--audio", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=-1, help="detector layer (negative counts from the end)")
    p.add_argument("--out", required=True, help="output path stem")

    p = add("mix-noise", cmd_mix_noise, "mix noise into a WAV at a target SNR")
    p.add_argument("--audio", required=True)
    p.add_argument("--noise", default="white", help="white, pub, or a WAV path")
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_run_config(args.config)
        return args.func(args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.DivergenceError, NumericalError, FloatingPointError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, hypernet.FilterFormatError, frontend.AudioFormatError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
