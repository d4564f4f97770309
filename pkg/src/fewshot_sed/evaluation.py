"""Frame posteriors to events, and event-based precision / recall / F."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ("Audiofilename", "Starttime", "Endtime")


@dataclass(frozen=True)
class EventList:
    events: tuple = ()

    def __post_init__(self):
        ev = tuple(sorted((float(a), float(b)) for a, b in self.events))
        for a, b in ev:
            if not b > a:
                raise ValueError(f"event offset must exceed onset: ({a}, {b})")
        for (_, b0), (a1, _) in zip(ev, ev[1:]):
            if a1 < b0:
                raise ValueError("events overlap")
        object.__setattr__(self, "events", ev)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def after(self, t: float) -> "EventList":
        """Events ending after ``t``, with onsets clipped to ``t``."""
        return EventList(tuple((max(a, t), b) for a, b in self.events if b > t and b > max(a, t)))


@dataclass
class ScoreReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=100 * self.precision, recall=100 * self.recall, f_score=100 * self.f_score)
        return d


def frames_to_events(posteriors, frame_rate: float, threshold: float = 0.5, min_dur: float = 0.06,
                     merge_gap: float = 0.05, start_time: float = 0.0) -> EventList:
    """Threshold, take positive runs, merge runs closer than merge_gap, drop short ones.

    Frame i covers [start_time + i / frame_rate, start_time + (i + 1) / frame_rate).
    """
    if frame_rate <= 0:
        raise ValueError("frame_rate must be positive")
    mask = np.asarray(posteriors, dtype=np.float64) > threshold
    if not mask.any():
        return EventList()
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    runs = edges.reshape(-1, 2)
    merged = []
    for on, off in runs:
        a, b = start_time + on / frame_rate, start_time + off / frame_rate
        if merged and a - merged[-1][1] < merge_gap:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    return EventList(tuple((a, b) for a, b in merged if b - a >= min_dur))


def iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


def match_events(pred: EventList, ref: EventList, iou_min: float = 0.3) -> tuple[int, int, int]:
    """Greedy one-to-one matching in onset order.

    Each prediction takes the unconsumed reference with the highest IoU
    (earliest on ties) provided that IoU >= iou_min.
    """
    used = [False] * len(ref)
    tp = 0
    for p in pred:
        best, best_iou = -1, iou_min
        for j, r in enumerate(ref.events):
            if used[j]:
                continue
            v = iou(p, r)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            tp += 1
    return tp, len(pred) - tp, len(ref) - tp


def score(pred: EventList, ref: EventList, iou_min: float = 0.3) -> ScoreReport:
    return ScoreReport(*match_events(pred, ref, iou_min))


def score_corpus(preds: dict, refs: dict, iou_min: float = 0.3) -> tuple[dict, ScoreReport]:
    """Per-file reports plus the micro-averaged aggregate (summed counts)."""
    per_file = {}
    for audio_id in sorted(set(preds) | set(refs)):
        per_file[audio_id] = score(preds.get(audio_id, EventList()), refs.get(audio_id, EventList()), iou_min)
    total = sum(per_file.values(), ScoreReport())
    return per_file, total


def read_event_csv(path) -> dict:
    """Read ``Audiofilename,Starttime,Endtime[,...]`` rows into per-file EventLists.

    If a ``Label`` column exists, only POS rows are kept.
    """
    rows = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            if "Label" in row and row["Label"] not in ("POS", None):
                continue
            rows[row["Audiofilename"]].append((float(row["Starttime"]), float(row["Endtime"])))
    return {k: EventList(tuple(v)) for k, v in rows.items()}


def write_event_csv(path, events: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for audio_id in sorted(events):
            for a, b in events[audio_id]:
                writer.writerow([audio_id, f"{a:.6f}", f"{b:.6f}"])


def format_table(per_file: dict, total: ScoreReport) -> str:
    lines = [f"{'file':<28}{'tp':>5}{'fp':>5}{'fn':>5}{'P%':>8}{'R%':>8}{'F%':>8}"]
    for name, r in list(per_file.items()) + [("TOTAL", total)]:
        lines.append(f"{Path(name).name:<28}{r.tp:>5}{r.fp:>5}{r.fn:>5}"
                     f"{100 * r.precision:>8.2f}{100 * r.recall:>8.2f}{100 * r.f_score:>8.2f}")
    return "\n".join(lines)
