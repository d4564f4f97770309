"""Command-line entry point.

Exit status: 0 on success, 1 if any file failed, 2 on a configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audio import NormStats, dump_matrix, features_from_file, normalize
from .config import SYNTH_PRESET, ConfigError, RunConfig
from .corpus import (N_SUPPORT_EVENTS, CorpusManifest, SynthSpec, build_episode, query_frame_posteriors,
                     read_annotations, synth_corpus)
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import (EventList, format_table, frames_to_events, read_event_csv, score, score_corpus,
                         write_event_csv)
from .pipeline import _file_seed, file_features, run_detection, train_base_encoder
from .transductive import POS, init_prototypes, update_classifier

log = logging.getLogger("fewshot_sed")

EXIT_OK, EXIT_FAILURES, EXIT_CONFIG = 0, 1, 2


def dumps_report(obj) -> str:
    # stable key order and float repr -> byte-identical output for identical runs
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config(args, **flags) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.load(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        changes[k.strip()] = v.strip()
    if changes:
        cfg = RunConfig.from_mapping({**cfg.to_dict(), **changes})
    flags = {k: v for k, v in flags.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "override", False):
        flags["override"] = True
    return cfg.replace(**flags).validate()


def _load_manifest(path) -> CorpusManifest:
    try:
        return CorpusManifest.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def _load_stats(manifest: CorpusManifest) -> NormStats:
    path = manifest.path(manifest.norm_stats)
    if not path.exists():
        raise ConfigError(f"normalization stats {path} missing; run train-base first")
    return NormStats.load(path)


def _load_encoder(path):
    try:
        return load_checkpoint(path)[0]
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# --- verbs -------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(n_files=args.n_files, n_base_files=args.n_base_files, event_rate=args.event_rate,
                     snr_db=args.snr_db, base_snr_db=args.base_snr_db, class_count=args.class_count, seed=args.seed)
    manifest = synth_corpus(spec, args.out)
    cfg = RunConfig().replace(**SYNTH_PRESET, seed=args.seed)
    _write(Path(args.out) / "run.cfg", "# tuned for the synthetic corpus; see README\n" + cfg.dumps())
    print(f"wrote {len(manifest.entries)} files to {args.out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config(args, epochs_base=args.epochs, lr_base=args.lr)
    manifest = _load_manifest(args.manifest)
    if not manifest.files("base"):
        raise ConfigError("manifest has no base split")
    result, stats, classes = train_base_encoder(manifest, cfg)
    stats.save(manifest.path(manifest.norm_stats))
    save_checkpoint(args.out, result.encoder, result.head)
    for e, (loss, acc) in enumerate(zip(result.losses, result.accuracies)):
        log.info("epoch %d loss %.4f acc %.3f", e + 1, loss, acc)
    print(f"{len(classes)} classes, final accuracy {result.accuracies[-1]:.3f}, "
          f"checksum {result.encoder.checksum()[:12]}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    loss = "none" if args.no_update else args.loss
    cfg = _config(args, epochs_W=args.epochs, lr_W=args.lr, lambda_ce=args.lambda_ce, loss=loss)
    manifest = _load_manifest(args.manifest)
    encoder = _load_encoder(args.encoder)
    stats = _load_stats(manifest)
    records, failed = [], 0
    for entry in manifest.files("test"):
        try:
            records.append(_adapt_file(manifest, entry, encoder, stats, cfg))
        except Exception as exc:
            failed += 1
            log.warning("%s failed: %s", entry.audio, exc)
            records.append({"audio": entry.audio, "status": "error", "error": f"{type(exc).__name__}: {exc}"})
    out = {"config": cfg.to_dict(), "encoder_checksum": encoder.checksum(), "episodes": records}
    text = dumps_report(out)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_FAILURES if failed else EXIT_OK


def _adapt_file(manifest, entry, encoder, stats, cfg) -> dict:
    mel = normalize(file_features(manifest, entry, cfg), stats)
    positives = sorted((a.onset, a.offset) for a in read_annotations(manifest.path(entry.annotations))
                       if a.label == "POS")
    episode = build_episode(mel.frames, mel.frame_rate, positives, encoder, cfg.neg_count,
                            _file_seed(cfg, entry.audio), cfg.seg_frames, cfg.seg_hop, cfg.neg_region,
                            source_id=entry.audio)
    c0 = init_prototypes(episode.support_raw, episode.labels, cfg.normalize_prototypes)
    res = update_classifier(c0, episode, cfg.epochs_for(entry.audio), cfg.lr_W, cfg.lambda_ce, cfg.loss)
    cutoff = positives[N_SUPPORT_EVENTS - 1][1]
    probs, first = query_frame_posteriors(res.table.p[:, POS], episode.query_frames, cfg.seg_frames,
                                          mel.n_frames)
    pred = frames_to_events(probs, mel.frame_rate, cfg.threshold, cfg.min_dur, cfg.merge_gap,
                            start_time=first / mel.frame_rate).after(cutoff)
    ref = EventList(tuple(positives[N_SUPPORT_EVENTS:])).after(cutoff)
    p = res.table.p[:, POS]
    return {"audio": entry.audio, "status": "ok", "losses": res.losses,
            "posterior_summary": {"mean_pos": float(p.mean()), "frac_pos": float((p > cfg.threshold).mean()),
                                  "marginal": [float(v) for v in res.table.marginal]},
            "score": score(pred, ref, cfg.iou_min).to_dict()}


def cmd_run(args) -> int:
    cfg = _config(args, iterations=args.iterations, tau=args.tau, negatives_cap=args.negatives_cap,
                  loss=args.loss)
    manifest = _load_manifest(args.manifest)
    encoder = _load_encoder(args.encoder)
    stats = _load_stats(manifest)
    report = run_detection(cfg, manifest, encoder, stats, args.workers)
    text = dumps_report(report)
    if args.report:
        _write(args.report, text)
    if args.pred:
        write_event_csv(args.pred, {Path(f["audio"]).name: EventList(tuple(map(tuple, f["predictions"])))
                                    for f in report["files"] if f["status"] == "ok"})
    agg = report["aggregate"]
    print(f"P {agg['precision']:.2f}  R {agg['recall']:.2f}  F {agg['f_score']:.2f}  "
          f"({report['failures']} failed)")
    return EXIT_FAILURES if report["failures"] else EXIT_OK


def cmd_score(args) -> int:
    try:
        preds = read_event_csv(args.pred)
        refs = read_event_csv(args.ref)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    per_file, total = score_corpus(preds, refs, args.iou)
    print(format_table(per_file, total))
    if args.json:
        _write(args.json, dumps_report({"iou_min": args.iou, "files": {k: v.to_dict() for k, v in per_file.items()},
                                        "aggregate": total.to_dict()}))
    return EXIT_OK


def cmd_features_dump(args) -> int:
    cfg = _config(args)
    try:
        mel = features_from_file(args.wav, cfg.sr, cfg.n_mels, cfg.window, cfg.hop)
    except (OSError, ValueError) as exc:
        log.error("%s: %s", args.wav, exc)
        return EXIT_FAILURES
    if args.stats:
        mel = normalize(mel, NormStats.load(args.stats))
    dump_matrix(args.out, mel.frames)
    print(f"{mel.frames.shape[0]} x {mel.frames.shape[1]} at {mel.frame_rate:.3f} fps")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--override", action="store_true", help="allow epochs outside the validated range")
    if seed:
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fewshot-sed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("out")
    d = SynthSpec()
    p.add_argument("--n-files", type=int, default=d.n_files)
    p.add_argument("--n-base-files", type=int, default=d.n_base_files)
    p.add_argument("--event-rate", type=float, default=d.event_rate)
    p.add_argument("--snr-db", type=float, default=d.snr_db)
    p.add_argument("--base-snr-db", type=float, default=d.base_snr_db)
    p.add_argument("--class-count", type=int, default=d.class_count)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-base", help="train the encoder on the base split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    _common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("adapt", help="transductive classifier update only")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-ce", type=float)
    p.add_argument("--loss", choices=["ce", "mi", "ce+mi"])
    p.add_argument("--no-update", action="store_true", help="posteriors from raw prototypes")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("run", help="full detection with mutual learning")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--negatives-cap", type=int)
    p.add_argument("--loss", choices=["none", "ce", "mi", "ce+mi"])
    p.add_argument("--report")
    p.add_argument("--pred", help="also write predictions as CSV")
    p.add_argument("--workers", type=int, help="default from FEWSHOT_SED_WORKERS, else 1")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="event-based P/R/F of a prediction CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--iou", type=float, default=RunConfig.iou_min)
    p.add_argument("--json")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("features", help="feature utilities")
    fsub = p.add_subparsers(dest="action", required=True)
    q = fsub.add_parser("dump", help="write a log-mel matrix")
    q.add_argument("wav")
    q.add_argument("out")
    q.add_argument("--stats", help="normalization stats .npz")
    _common(q, seed=False)
    q.set_defaults(func=cmd_features_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
