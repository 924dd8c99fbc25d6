"""Command-line entry point for the full pipeline.

Subcommands: synth, extract, pretrain, train, kfold, finetune, evaluate.
Exit codes: 0 success, 1 runtime failure, 2 usage error. Every results file
embeds the resolved config hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import report as R
from . import train as T
from .audio import TARGET_RATE, clip_pad_7s, read_wav, resample_16k, write_wav
from .checkpoint import load_checkpoint, restore_module, save_checkpoint
from .config import RunConfig, config_hash, load_run_config
from .corpus import load_manifest, synth_corpus, write_manifest
from .errors import ConfigError, EmofuseError, ParameterError
from .fmx import FeatureMatrix, read_fmx, write_fmx
from .mfcc import extract_mfcc39
from .model import FusionModel
from .prosody import extract_prosody103
from .ssrl import SsrlConfig, SsrlEncoder, kmeans_fit, pretrain

FEATURE_KINDS = ("mfcc", "prosody", "ssrl-embed")


def cache_dir() -> Path:
    env = os.environ.get("EMOFUSE_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "emofuse"


def _parse_fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_subset(text: str) -> T.SubsetPolicy:
    """'speakers:0.2' or 'utterances:1/10' -> SubsetPolicy."""
    try:
        kind, frac = text.split(":", 1)
        return T.SubsetPolicy(kind, _parse_fraction(frac))
    except (ValueError, ZeroDivisionError, ParameterError) as exc:
        raise argparse.ArgumentTypeError(
            f"bad subset {text!r} (want kind:fraction): {exc}") from exc


def _parse_features(text: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    for kind in kinds:
        if kind not in FEATURE_KINDS:
            raise argparse.ArgumentTypeError(
                f"unknown feature kind {kind!r}; choose from {', '.join(FEATURE_KINDS)}")
    if not kinds:
        raise argparse.ArgumentTypeError("no feature kinds given")
    return kinds


# -- shared plumbing -----------------------------------------------------------------

def _load_config(args) -> tuple[RunConfig, str]:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_run_config(getattr(args, "config", None), overrides)
    return cfg, config_hash(cfg)


def _resolve_wav(manifest_path: Path, rec_path: str) -> Path:
    p = Path(rec_path)
    return p if p.is_absolute() else manifest_path.parent / p


def _corpus_pairs(cfg: RunConfig, manifest) -> list:
    """(AudioSegment, UtteranceRecord) pairs from a manifest or the synth corpus."""
    if manifest is not None:
        manifest = Path(manifest)
        records = load_manifest(manifest)
        return [(read_wav(_resolve_wav(manifest, rec.path)), rec) for rec in records]
    spec = cfg.corpus
    return synth_corpus(spec.n_speakers, spec.n_per_class, spec.seed, spec.recipe_set)


def _load_encoder(path) -> SsrlEncoder:
    tensors, config = load_checkpoint(path)
    if "ssrl" not in config:
        raise ConfigError(f"{path} is not an encoder checkpoint")
    encoder = SsrlEncoder(SsrlConfig(**config["ssrl"]), np.random.default_rng(0))
    restore_module(encoder, tensors, strict=True)
    return encoder


def _build_features(cfg: RunConfig, manifest, encoder_ckpt) -> T.FeatureSet:
    encoder = _load_encoder(encoder_ckpt)
    if encoder.cfg.embed_dim != cfg.model.ssrl_dim:
        raise ConfigError(
            f"encoder width {encoder.cfg.embed_dim} does not match model.ssrl_dim "
            f"{cfg.model.ssrl_dim}")
    return T.build_feature_set(_corpus_pairs(cfg, manifest), encoder=encoder)


# -- synth ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg, _ = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _corpus_pairs(cfg, None)
    for seg, rec in pairs:
        wav_path = out / rec.path
        wav_path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(wav_path, seg)
    write_manifest(out / "manifest.csv", [rec for _, rec in pairs])
    print(f"wrote {len(pairs)} utterances and manifest.csv under {out}")
    return 0


# -- extract -------------------------------------------------------------------------

def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fresh(target: Path, kind: str, source_hash: str) -> bool:
    if not target.exists():
        return False
    try:
        _, meta = read_fmx(target)
    except EmofuseError:
        return False
    return meta.get("kind") == kind and meta.get("source_sha256") == source_hash


def _segment_features(wav_path: Path):
    seg = read_wav(wav_path)
    if seg.sample_rate != TARGET_RATE:
        seg = resample_16k(seg)
    return clip_pad_7s(seg)


def _extract_plain(job) -> list[tuple[str, str]]:
    """Worker: mfcc/prosody extraction for one utterance. Returns (file, status)."""
    wav, rel, kinds, out_dir, cfg_hash, seed = job
    wav, out_dir = Path(wav), Path(out_dir)
    results = []
    try:
        pieces = _segment_features(wav)
        source_hash = _file_sha256(wav)
        for kind in kinds:
            target = out_dir / f"{rel}.{kind}.fmx"
            if _fresh(target, kind, source_hash):
                results.append((str(target), "skipped"))
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            if kind == "mfcc":
                mats = [extract_mfcc39(p) for p in pieces]
            else:
                mats = [extract_prosody103(p) for p in pieces]
            stacked = FeatureMatrix(np.concatenate([m.data for m in mats], axis=0),
                                    mats[0].dim_labels)
            write_fmx(target, stacked, metadata={
                "kind": kind, "source_sha256": source_hash,
                "n_segments": len(pieces),
                "frames_per_segment": mats[0].data.shape[0],
                "config_hash": cfg_hash, "seed": seed})
            results.append((str(target), "written"))
    except (EmofuseError, OSError) as exc:
        results.append((str(wav), f"error: {exc}"))
    return results


def _extract_embeddings(records, manifest: Path, out_dir: Path, encoder,
                        cfg_hash: str, seed: int, encoder_hash: str):
    results = []
    for rec in records:
        wav = _resolve_wav(manifest, rec.path)
        try:
            source_hash = _file_sha256(wav)
            target = out_dir / f"{rec.path}.ssrl-embed.fmx"
            if _fresh(target, "ssrl-embed", source_hash + encoder_hash):
                results.append((str(target), "skipped"))
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            sub = T.build_feature_set([(read_wav(wav), rec)], encoder=encoder)
            final = sub.hiddens[-1]  # (n_segments, T, D) top encoder layer
            stacked = final.reshape(-1, final.shape[-1])
            write_fmx(target, FeatureMatrix(stacked), metadata={
                "kind": "ssrl-embed", "source_sha256": source_hash + encoder_hash,
                "n_segments": final.shape[0], "frames_per_segment": final.shape[1],
                "layer": encoder.cfg.n_layers,
                "config_hash": cfg_hash, "seed": seed})
            results.append((str(target), "written"))
        except (EmofuseError, OSError) as exc:
            results.append((str(wav), f"error: {exc}"))
    return results


def cmd_extract(args) -> int:
    cfg, cfg_hash = _load_config(args)
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    out_dir = Path(args.out) if args.out else cache_dir() / "features"
    out_dir.mkdir(parents=True, exist_ok=True)
    plain_kinds = tuple(k for k in args.features if k != "ssrl-embed")
    results = []
    if plain_kinds:
        jobs = [(str(_resolve_wav(manifest, rec.path)), rec.path, plain_kinds,
                 str(out_dir), cfg_hash, cfg.seed) for rec in records]
        workers = args.workers or os.cpu_count() or 1
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for chunk in pool.map(_extract_plain, jobs):
                    results.extend(chunk)
        else:
            for job in jobs:
                results.extend(_extract_plain(job))
    if "ssrl-embed" in args.features:
        if not args.encoder_ckpt:
            print("error: --encoder-ckpt is required for ssrl-embed extraction",
                  file=sys.stderr)
            return 2
        encoder = _load_encoder(args.encoder_ckpt)
        encoder_hash = _file_sha256(Path(args.encoder_ckpt))
        results.extend(_extract_embeddings(records, manifest, out_dir, encoder,
                                           cfg_hash, cfg.seed, encoder_hash))
    failures = [(f, s) for f, s in results if s.startswith("error")]
    written = sum(1 for _, s in results if s == "written")
    skipped = sum(1 for _, s in results if s == "skipped")
    print(f"extracted {written} files, skipped {skipped} up-to-date files")
    for name, status in failures:
        detail = status[7:]
        if detail.startswith(f"{name}: "):  # exception text already names the file
            detail = detail[len(name) + 2:]
        print(f"error: {name}: {detail}", file=sys.stderr)
    return 1 if failures else 0


# -- pretrain ------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg, cfg_hash = _load_config(args)
    pairs = _corpus_pairs(cfg, args.manifest)
    seqs = []
    for seg, _rec in pairs:
        s16 = seg if seg.sample_rate == TARGET_RATE else resample_16k(seg)
        for piece in clip_pad_7s(s16):
            seqs.append(extract_mfcc39(piece).data)
    frames = np.concatenate(seqs, axis=0)
    labels = kmeans_fit(frames, cfg.encoder.n_clusters, seed=cfg.seed).labels
    t = seqs[0].shape[0]
    label_seqs = [labels[i * t:(i + 1) * t] for i in range(len(seqs))]
    encoder = SsrlEncoder(cfg.encoder, np.random.default_rng(cfg.seed))
    history = pretrain(encoder, seqs, label_seqs, epochs=cfg.pretrain.epochs,
                       lr=cfg.pretrain.lr, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, encoder, config={
        "ssrl": asdict(cfg.encoder), "config_hash": cfg_hash, "seed": cfg.seed})
    with out.with_suffix(".history.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "masked_nll"])
        for epoch, value in enumerate(history):
            writer.writerow([epoch, repr(value)])
    print(f"pretrained {cfg.pretrain.epochs} epochs: masked NLL "
          f"{history[0]:.4f} -> {history[-1]:.4f}; saved {out}")
    return 0


# -- train / kfold -------------------------------------------------------------------

def _write_fold_json(out_dir: Path, result: T.FoldResult, cfg_hash: str, seed: int):
    payload = {
        "fold": result.fold, "wa": result.wa, "ua": result.ua,
        "best_epoch": result.best_epoch, "best_val_ua": result.best_val_ua,
        "epochs_run": len(result.history),
        "n_test_utterances": result.n_test_utterances,
        "config_hash": cfg_hash, "seed": seed,
    }
    path = out_dir / f"results_fold{result.fold:02d}.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def cmd_train(args) -> int:
    cfg, cfg_hash = _load_config(args)
    feats = _build_features(cfg, args.manifest, args.encoder_ckpt)
    plan = T.kfold_split(sorted(set(feats.speakers)), n_folds=args.folds,
                         seed=cfg.seed)
    fold = plan.folds[args.fold]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = T.run_fold(cfg.model, feats, fold, cfg.trainer, fold_index=args.fold,
                        ckpt_path=out_dir / "model.ckpt",
                        extra_config={"config_hash": cfg_hash})
    R.report(out_dir, [result], seed=cfg.seed, config_hash=cfg_hash)
    _write_fold_json(out_dir, result, cfg_hash, cfg.seed)
    print(f"fold {args.fold}: WA {result.wa:.3f} UA {result.ua:.3f} "
          f"(best epoch {result.best_epoch}); artifacts in {out_dir}")
    return 0


def cmd_kfold(args) -> int:
    cfg, cfg_hash = _load_config(args)
    feats = _build_features(cfg, args.manifest, args.encoder_ckpt)
    plan = T.kfold_split(sorted(set(feats.speakers)), n_folds=args.folds,
                         seed=cfg.seed)
    results = T.run_kfold(cfg.model, feats, plan, cfg.trainer)
    out_dir = Path(args.out)
    R.report(out_dir, results, seed=cfg.seed, config_hash=cfg_hash)
    for result in results:
        _write_fold_json(out_dir, result, cfg_hash, cfg.seed)
    mean_wa = float(np.mean([r.wa for r in results]))
    mean_ua = float(np.mean([r.ua for r in results]))
    print(f"{plan.n_folds}-fold: mean WA {mean_wa:.3f} mean UA {mean_ua:.3f}; "
          f"artifacts in {out_dir}")
    return 0


# -- finetune / evaluate ----------------------------------------------------------------

def cmd_finetune(args) -> int:
    cfg, cfg_hash = _load_config(args)
    feats = _build_features(cfg, args.manifest, args.encoder_ckpt)
    speakers = sorted(set(feats.speakers))
    plan = T.kfold_split(speakers, n_folds=len(speakers), seed=cfg.seed)
    fold = plan.folds[0]
    pool = feats.indices_for_speakers(fold.train_speakers)
    val = feats.indices_for_speakers(fold.val_speakers)
    test = feats.indices_for_speakers(fold.test_speakers)
    outcome = T.fine_tune(args.source_ckpt, feats, pool, val, args.subset,
                          cfg.trainer)
    chosen = sorted(set(feats.speakers[outcome.selected_idx]))
    print(f"selected speakers: {', '.join(chosen)}")
    scored = T.standardize(feats, outcome.stats)
    ev = T.evaluate_features(outcome.model, scored, test)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # the adapted weights keep the source architecture, not this run's model section
    src_model = load_checkpoint(args.source_ckpt)[1]["model"]
    save_checkpoint(out_dir / "model.ckpt", outcome.model, config={
        "model": src_model, "stats": outcome.stats.to_dict(),
        "seed": cfg.seed, "config_hash": cfg_hash})
    result = T.FoldResult(0, ev.wa, ev.ua, ev.confusion,
                          outcome.train_result.history,
                          outcome.train_result.best_epoch,
                          outcome.train_result.best_val_ua, len(ev.true_ids))
    R.report(out_dir, [result], seed=cfg.seed, config_hash=cfg_hash)
    print(f"fine-tuned on {outcome.selected_idx.size} segments: "
          f"WA {ev.wa:.3f} UA {ev.ua:.3f}; artifacts in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, cfg_hash = _load_config(args)
    feats = _build_features(cfg, args.manifest, args.encoder_ckpt)
    ev = T.evaluate(args.source_ckpt, feats)
    payload = {"wa": ev.wa, "ua": ev.ua, "n_utterances": len(ev.true_ids),
               "config_hash": cfg_hash, "seed": cfg.seed}
    print(json.dumps(payload, sort_keys=True, indent=2))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "evaluation.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")
        R.write_confusion_csv(out_dir / "confusion.csv", ev.confusion)
        R.render_confusion_heatmap(out_dir / "confusion.png", ev.confusion)
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emofuse",
        description="Speech emotion recognition: features, fusion model, training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="TOML or JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        if manifest:
            p.add_argument("--manifest",
                           help="utterance manifest CSV (default: synthetic corpus)")

    p = sub.add_parser("synth", help="write the synthetic corpus as WAVs + manifest")
    common(p, manifest=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract features to FMX files")
    common(p, manifest=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="feature directory (default: $EMOFUSE_CACHE)")
    p.add_argument("--features", type=_parse_features,
                   default=("mfcc", "prosody"),
                   help="comma list from: " + ", ".join(FEATURE_KINDS))
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--encoder-ckpt", help="needed for ssrl-embed")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", help="masked-prediction pretraining of the encoder")
    common(p)
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one cross-validation fold")
    common(p)
    p.add_argument("--encoder-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("kfold", help="speaker-disjoint cross-validation")
    common(p)
    p.add_argument("--encoder-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("finetune", help="transfer a trained model to a new corpus")
    common(p)
    p.add_argument("--encoder-ckpt", required=True)
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--subset", type=parse_subset, required=True,
                   help="speakers:FRACTION or utterances:FRACTION")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    common(p)
    p.add_argument("--encoder-ckpt", required=True)
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (EmofuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
