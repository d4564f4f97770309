"""End-to-end orchestration: base training, per-file adaptation, scoring."""
from __future__ import annotations

import json
import logging
import os
from importlib import resources
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .audio import MelSpectrogram, NormStats, compute_norm_stats, features_from_file, normalize
from .config import RunConfig
from .corpus import (N_SUPPORT_EVENTS, CorpusManifest, ManifestEntry, base_segments, build_episode,
                     query_frame_posteriors, read_annotations)
from .encoder import ClassificationHead, Encoder, TrainResult, train_base
from .evaluation import EventList, ScoreReport, frames_to_events, score
from .mutual import mutual_learning_loop
from .transductive import POS

log = logging.getLogger(__name__)

WORKERS_ENV = "FEWSHOT_SED_WORKERS"
REPORT_VERSION = 1


def file_features(manifest: CorpusManifest, entry: ManifestEntry, cfg: RunConfig) -> MelSpectrogram:
    return features_from_file(manifest.path(entry.audio), cfg.sr, cfg.n_mels, cfg.window, cfg.hop)


def fit_norm_stats(manifest: CorpusManifest, cfg: RunConfig) -> NormStats:
    base = manifest.files("base")
    if not base:
        raise ValueError("manifest has no base split")
    return compute_norm_stats(file_features(manifest, e, cfg) for e in base)


@dataclass
class BaseData:
    segments: np.ndarray
    labels: np.ndarray
    classes: list


def collect_base(manifest: CorpusManifest, stats: NormStats, cfg: RunConfig) -> BaseData:
    entries = manifest.files("base")
    anns = {e.audio: read_annotations(manifest.path(e.annotations)) for e in entries}
    classes = sorted({a.label for rows in anns.values() for a in rows})
    if cfg.base_background:
        classes.append("__background__")
    index = {c: i for i, c in enumerate(classes)}
    bg = index.get("__background__")
    rng = np.random.default_rng(cfg.seed)
    segs, labels = [], []
    for e in entries:
        mel = normalize(file_features(manifest, e, cfg), stats)
        s, y = base_segments(mel.frames, mel.frame_rate, anns[e.audio], index, cfg.seg_frames,
                             cfg.seg_hop, background_label=bg, rng=rng)
        segs.append(s)
        labels.append(y)
    return BaseData(np.concatenate(segs), np.concatenate(labels), classes)


def train_base_encoder(manifest: CorpusManifest, cfg: RunConfig, stats: NormStats | None = None):
    """Fit normalization stats and the base encoder. Returns (TrainResult, stats, classes)."""
    stats = stats or fit_norm_stats(manifest, cfg)
    data = collect_base(manifest, stats, cfg)
    encoder = Encoder.init(in_shape=(cfg.seg_frames, cfg.n_mels), seed=cfg.seed)
    head = ClassificationHead.init(len(data.classes), encoder.dim, seed=cfg.seed)
    result: TrainResult = train_base(encoder, head, data.segments, data.labels, cfg.epochs_base,
                                     cfg.lr_base, cfg.batch_size, cfg.seed)
    return result, stats, data.classes


def _file_seed(cfg: RunConfig, audio: str) -> int:
    # stable across processes, unlike hash()
    return (cfg.seed * 1_000_003 + sum(ord(ch) * (i + 1) for i, ch in enumerate(audio))) % (2 ** 31)


def process_file(manifest: CorpusManifest, entry: ManifestEntry, encoder: Encoder, stats: NormStats,
                 cfg: RunConfig) -> dict:
    """Episode -> mutual learning -> events -> score, for one test file."""
    mel = normalize(file_features(manifest, entry, cfg), stats)
    positives = sorted((a.onset, a.offset) for a in read_annotations(manifest.path(entry.annotations))
                       if a.label == "POS")
    seed = _file_seed(cfg, entry.audio)
    episode = build_episode(mel.frames, mel.frame_rate, positives, encoder, cfg.neg_count, seed,
                            cfg.seg_frames, cfg.seg_hop, cfg.neg_region, source_id=entry.audio)
    cutoff = positives[N_SUPPORT_EVENTS - 1][1]
    ref = EventList(tuple(positives[N_SUPPORT_EVENTS:])).after(cutoff)

    def to_events(table) -> EventList:
        probs, first = query_frame_posteriors(table.p[:, POS], episode.query_frames, cfg.seg_frames,
                                              mel.n_frames)
        return frames_to_events(probs, mel.frame_rate, cfg.threshold, cfg.min_dur, cfg.merge_gap,
                                start_time=first / mel.frame_rate).after(cutoff)

    def evaluate(table) -> dict:
        return score(to_events(table), ref, cfg.iou_min).to_dict()

    report = mutual_learning_loop(
        episode, encoder, cfg.iterations, ti_epochs=cfg.epochs_for(entry.audio), ti_lr=cfg.lr_W,
        lambda_ce=cfg.lambda_ce,
        loss=cfg.loss, normalize_prototypes=cfg.normalize_prototypes, tau=cfg.tau, ft_epochs=cfg.epochs_ft,
        lr_encoder=cfg.lr_ft, lr_head=cfg.lr_head, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
        negatives_cap=cfg.negatives_cap, include_support=cfg.ft_include_support,
        batch_size=cfg.ft_batch_size, seed=seed,
        evaluate=evaluate)
    pred = to_events(report.table)
    final = score(pred, ref, cfg.iou_min)
    p = report.table.p[:, POS]
    return {
        "audio": entry.audio,
        "status": "ok",
        "cutoff": cutoff,
        "n_support_pos": int((episode.labels == POS).sum()),
        "n_support_neg": int((episode.labels != POS).sum()),
        "n_query": int(len(episode.query)),
        "posterior_summary": {"mean_pos": float(p.mean()), "frac_pos": float((p > cfg.threshold).mean()),
                              "marginal": [float(v) for v in report.table.marginal]},
        "iterations": [r.to_dict() for r in report.records],
        "score": final.to_dict(),
        "predictions": [[a, b] for a, b in pred],
    }


def _safe_process(args) -> dict:
    manifest, entry, encoder, stats, cfg = args
    try:
        return process_file(manifest, entry, encoder, stats, cfg)
    except Exception as exc:  # isolate per-file failures
        log.warning("%s failed: %s", entry.audio, exc)
        return {"audio": entry.audio, "status": "error", "error": f"{type(exc).__name__}: {exc}"}


def run_detection(cfg: RunConfig, manifest: CorpusManifest, encoder: Encoder, stats: NormStats,
                  workers: int | None = None) -> dict:
    """Process every test file and aggregate micro-averaged counts."""
    cfg.validate()
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    jobs = [(manifest, e, encoder, stats, cfg) for e in manifest.files("test")]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            files = list(pool.map(_safe_process, jobs))
    else:
        files = [_safe_process(j) for j in jobs]

    total = ScoreReport()
    for f in files:
        if f["status"] == "ok":
            s = f["score"]
            total = total + ScoreReport(s["tp"], s["fp"], s["fn"])
    n_iter = cfg.iterations + 1
    per_iter = []
    for it in range(n_iter):
        acc = ScoreReport()
        for f in files:
            if f["status"] == "ok":
                m = f["iterations"][it]["metrics"]
                acc = acc + ScoreReport(m["tp"], m["fp"], m["fn"])
        per_iter.append({"iteration": it, **acc.to_dict()})
    return {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "encoder_checksum": encoder.checksum(),
        "files": files,
        "aggregate": total.to_dict(),
        "aggregate_per_iteration": per_iter,
        "failures": sum(f["status"] != "ok" for f in files),
    }


def mean_file_f(report: dict, iteration: int | None = None) -> float:
    """Mean per-file F-score (percent) over successful files."""
    vals = []
    for f in report["files"]:
        if f["status"] != "ok":
            continue
        vals.append(f["score"]["f_score"] if iteration is None else f["iterations"][iteration]["metrics"]["f_score"])
    return float(np.mean(vals)) if vals else 0.0


def report_schema() -> dict:
    """JSON schema of the report written by ``run``."""
    return json.loads(resources.files(__package__).joinpath("report_schema.json").read_text())
