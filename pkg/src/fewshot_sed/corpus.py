"""Corpus manifests, annotations, synthetic data and episode construction."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, WaveBuffer, extract_segments, segment_starts, write_wav
from .transductive import NEG, POS, Episode, EpisodeError

ANNOTATION_HEADER = ("Audiofilename", "Starttime", "Endtime", "Label")
N_SUPPORT_EVENTS = 5


# --- annotations and manifest ---------------------------------------------

@dataclass
class Annotation:
    audio_id: str
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"annotation onset must precede offset: {self}")


def read_annotations(path) -> list[Annotation]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Annotation(row["Audiofilename"], float(row["Starttime"]), float(row["Endtime"]),
                                  row.get("Label") or "POS"))
    return out


def write_annotations(path, rows: list[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_HEADER)
        for a in rows:
            w.writerow([a.audio_id, f"{a.onset:.6f}", f"{a.offset:.6f}", a.label])


@dataclass
class ManifestEntry:
    audio: str
    annotations: str
    split: str


@dataclass
class CorpusManifest:
    entries: list
    norm_stats: str = "norm_stats.npz"
    root: Path = field(default=Path("."), repr=False)

    def files(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def save(self, path) -> None:
        doc = {"files": [asdict(e) for e in self.entries], "norm_stats": self.norm_stats}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in doc["files"]]
        for e in entries:
            if e.split not in ("base", "test"):
                raise ValueError(f"unknown split {e.split!r} in {path}")
        return cls(entries, doc.get("norm_stats", "norm_stats.npz"), path.parent)


# --- synthetic corpus ------------------------------------------------------

@dataclass
class SynthSpec:
    n_files: int = 8
    n_base_files: int = 8
    event_rate: float = 1.0
    distractor_rate: float = 0.3
    snr_db: float = 10.0
    base_snr_db: float | None = 0.0
    class_count: int = 12
    duration: float = 12.0
    base_duration: float = 10.0
    seed: int = 0


# (kind, f_a, f_b): tones use f_a, sweeps go f_a -> f_b, trills modulate f_a at f_b Hz,
# bands fill [f_a, f_b]
CLASS_TEMPLATES = [
    ("tone", 700.0, 0.0),
    ("sweep", 1200.0, 3200.0),
    ("trill", 4200.0, 25.0),
    ("band", 6500.0, 8500.0),
    ("tone", 2600.0, 0.0),
    ("sweep", 5200.0, 2400.0),
    ("trill", 1600.0, 40.0),
    ("band", 300.0, 1000.0),
    ("sweep", 800.0, 1800.0),
    ("tone", 4800.0, 0.0),
    ("trill", 7000.0, 18.0),
    ("band", 3000.0, 4000.0),
]


def class_name(c: int) -> str:
    return f"class{c:02d}"


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.sqrt(np.mean(x ** 2))


def render_event(kind: str, fa: float, fb: float, dur: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS event with 5 ms raised-cosine ramps."""
    n = max(int(round(dur * sr)), 2)
    t = np.arange(n) / sr
    if kind == "tone":
        x = sum(np.sin(2 * np.pi * h * fa * t + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
    elif kind == "sweep":
        phase = 2 * np.pi * (fa * t + (fb - fa) * t ** 2 / (2 * dur))
        x = np.sin(phase)
    elif kind == "trill":
        x = np.sin(2 * np.pi * fa * t) * (0.5 + 0.5 * np.sin(2 * np.pi * fb * t))
    elif kind == "band":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sr)
        spec[(freqs < fa) | (freqs > fb)] = 0
        x = np.fft.irfft(spec, n)
    else:
        raise ValueError(kind)
    ramp = min(int(0.005 * sr), n // 2)
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    x = x * env
    return x / np.sqrt(np.mean(x ** 2))


def _place_events(duration: float, rate: float, rng, min_gap: float = 0.25,
                  dur_range=(0.15, 0.45), taken=()) -> list[tuple[float, float]]:
    """Sequential non-overlapping events separated by >= min_gap from each other and ``taken``."""
    events = []
    t = rng.uniform(0.2, 0.6)
    while True:
        t += rng.exponential(1.0 / rate) if rate > 0 else duration
        d = rng.uniform(*dur_range)
        if t + d > duration - 0.2:
            break
        if all(t + d + min_gap <= a or t >= b + min_gap for a, b in taken):
            events.append((t, t + d))
            t += d + min_gap
        else:
            t += min_gap
    return events


def synth_file(classes_events, duration: float, snr_db: float, sr: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Mix events over pink noise; returns (mixture, clean). Events have RMS 0.1."""
    n = int(round(duration * sr))
    clean = np.zeros(n)
    for c, (a, b) in classes_events:
        kind, fa, fb = CLASS_TEMPLATES[c % len(CLASS_TEMPLATES)]
        jitter = rng.uniform(0.95, 1.05)
        fb_j = fb if kind == "trill" else fb * jitter
        ev = 0.1 * render_event(kind, fa * jitter, fb_j, b - a, sr, rng)
        i0 = int(round(a * sr))
        clean[i0:i0 + ev.size] += ev[: n - i0]
    noise = pink_noise(n, rng) * 0.1 / 10 ** (snr_db / 20)
    mix = np.clip(clean + noise, -1.0, 32767 / 32768)
    return mix, clean


def synth_corpus(spec: SynthSpec, out_dir, sr: int = SAMPLE_RATE) -> CorpusManifest:
    """Write a synthetic base/test corpus and its manifest under ``out_dir``.

    The first half of the classes populate the base split, the rest the test
    split, so base and test label sets never intersect. Each test file has one
    target class (annotated POS) and unannotated distractors of another test
    class.
    """
    if spec.class_count < 4 or spec.class_count > len(CLASS_TEMPLATES):
        raise ValueError(f"class_count must lie in [4, {len(CLASS_TEMPLATES)}]")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_base = spec.class_count // 2
    base_classes = list(range(n_base))
    test_classes = list(range(n_base, spec.class_count))
    entries = []

    for i in range(spec.n_base_files):
        name = f"base_{i:03d}"
        times = _place_events(spec.base_duration, spec.event_rate * 1.5, rng)
        labels = [int(rng.choice(base_classes)) for _ in times]
        base_snr = spec.snr_db if spec.base_snr_db is None else spec.base_snr_db
        mix, _ = synth_file(list(zip(labels, times)), spec.base_duration, base_snr, sr, rng)
        write_wav(out / "audio" / f"{name}.wav", WaveBuffer(mix, sr))
        write_annotations(out / "annotations" / f"{name}.csv",
                          [Annotation(f"{name}.wav", a, b, class_name(c)) for c, (a, b) in zip(labels, times)])
        entries.append(ManifestEntry(f"audio/{name}.wav", f"annotations/{name}.csv", "base"))

    for i in range(spec.n_files):
        name = f"test_{i:03d}"
        target = test_classes[i % len(test_classes)]
        others = [c for c in test_classes if c != target]
        distractor = others[i % len(others)]
        for _ in range(100):
            pos = _place_events(spec.duration, spec.event_rate, rng)
            if len(pos) > N_SUPPORT_EVENTS + 2:
                break
        else:
            raise ValueError("duration/event_rate too small to place the support events")
        dis = _place_events(spec.duration, spec.distractor_rate, rng, taken=pos)
        events = [(target, e) for e in pos] + [(distractor, e) for e in dis]
        mix, _ = synth_file(events, spec.duration, spec.snr_db, sr, rng)
        write_wav(out / "audio" / f"{name}.wav", WaveBuffer(mix, sr))
        write_annotations(out / "annotations" / f"{name}.csv",
                          [Annotation(f"{name}.wav", a, b, "POS") for a, b in pos])
        entries.append(ManifestEntry(f"audio/{name}.wav", f"annotations/{name}.csv", "test"))

    manifest = CorpusManifest(entries, "norm_stats.npz", out)
    manifest.save(out / "manifest.json")
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return manifest


# --- segments and episodes -------------------------------------------------

def overlap_fraction(starts, seg_len: int, frame_rate: float, events) -> np.ndarray:
    """For each segment, the largest fraction of its duration covered by one event."""
    starts = np.asarray(starts, dtype=np.float64)
    a = starts / frame_rate
    b = (starts + seg_len) / frame_rate
    frac = np.zeros(starts.size)
    for on, off in events:
        inter = np.clip(np.minimum(b, off) - np.maximum(a, on), 0.0, None)
        frac = np.maximum(frac, inter / (b - a))
    return frac


def event_segment_starts(n_frames: int, seg_len: int, seg_hop: int, frame_rate: float, event) -> np.ndarray:
    """Segments at least half covered by ``event``; the centred one if none qualify."""
    starts = segment_starts(n_frames, seg_len, seg_hop)
    hit = starts[overlap_fraction(starts, seg_len, frame_rate, [event]) >= 0.5]
    if hit.size:
        return hit
    centre = 0.5 * (event[0] + event[1]) * frame_rate
    s = int(np.clip(round(centre - seg_len / 2), 0, max(n_frames - seg_len, 0)))
    return np.array([s])


def base_segments(frames: np.ndarray, frame_rate: float, annotations: list[Annotation],
                  class_index: dict, seg_len: int = 17, seg_hop: int = 4,
                  background_label: int | None = None, rng=None):
    """Labelled training segments from one base file."""
    starts, labels = [], []
    n = frames.shape[0]
    for ann in annotations:
        s = event_segment_starts(n, seg_len, seg_hop, frame_rate, (ann.onset, ann.offset))
        starts.append(s)
        labels.append(np.full(s.size, class_index[ann.label]))
    if background_label is not None:
        all_starts = segment_starts(n, seg_len, seg_hop)
        events = [(a.onset, a.offset) for a in annotations]
        free = all_starts[overlap_fraction(all_starts, seg_len, frame_rate, events) == 0]
        if free.size:
            k = min(free.size, max(1, sum(x.size for x in starts) // max(len(class_index) - 1, 1)))
            pick = np.sort((rng or np.random.default_rng(0)).choice(free, size=k, replace=False))
            starts.append(pick)
            labels.append(np.full(k, background_label))
    if not starts:
        return np.zeros((0, seg_len, frames.shape[1])), np.zeros(0, dtype=int)
    starts = np.concatenate(starts)
    return extract_segments(frames, starts, seg_len), np.concatenate(labels)


def build_episode(frames: np.ndarray, frame_rate: float, positives, encoder, neg_count: int = 16,
                  seed: int = 0, seg_len: int = 17, seg_hop: int = 4, neg_region: str = "before_fifth",
                  source_id: str = "") -> Episode:
    """Support from the first five positive events plus sampled negatives; query after them.

    POS support: segments at least half covered by one of the first five
    events. NEG support: ``neg_count`` seeded draws among segments touching no
    positive event (ending before the fifth event's offset unless
    ``neg_region='anywhere'``). Query: every segment starting at or after the
    fifth event's offset.
    """
    positives = sorted((float(a), float(b)) for a, b in positives)
    if len(positives) < N_SUPPORT_EVENTS:
        raise EpisodeError(f"{source_id}: need {N_SUPPORT_EVENTS} positive events, found {len(positives)}")
    support_events = positives[:N_SUPPORT_EVENTS]
    cutoff = support_events[-1][1]
    n = frames.shape[0]
    starts = segment_starts(n, seg_len, seg_hop)

    pos_starts = np.unique(np.concatenate(
        [event_segment_starts(n, seg_len, seg_hop, frame_rate, ev) for ev in support_events]))
    clear = overlap_fraction(starts, seg_len, frame_rate, positives) == 0
    if neg_region == "before_fifth":
        clear &= (starts + seg_len) / frame_rate <= cutoff
    candidates = starts[clear]
    if candidates.size == 0:
        raise EpisodeError(f"{source_id}: no unlabelled region to sample negatives from")
    rng = np.random.default_rng(seed)
    k = min(neg_count, candidates.size)
    neg_starts = np.sort(rng.choice(candidates, size=k, replace=False))

    query_starts = starts[starts / frame_rate >= cutoff]
    if query_starts.size == 0:
        raise EpisodeError(f"{source_id}: nothing left to query after the fifth event")

    support_starts = np.concatenate([pos_starts, neg_starts])
    labels = np.concatenate([np.full(pos_starts.size, POS), np.full(neg_starts.size, NEG)])
    s_seg = extract_segments(frames, support_starts, seg_len)
    q_seg = extract_segments(frames, query_starts, seg_len)
    return Episode.from_embeddings(
        encoder.embed(s_seg), labels, encoder.embed(q_seg),
        support_segments=s_seg, query_segments=q_seg, source_id=source_id,
        support_frames=support_starts, query_frames=query_starts, encoder_checksum=encoder.checksum())


def query_frame_posteriors(pos_prob: np.ndarray, query_starts: np.ndarray, seg_len: int,
                           n_frames: int) -> tuple[np.ndarray, int]:
    """Spread per-segment POS probabilities onto frames.

    Each frame from the first query start onwards takes the probability of the
    segment whose centre is nearest. Returns (frame probabilities, first frame).
    """
    first = int(query_starts[0])
    centres = query_starts + seg_len / 2.0
    t = np.arange(first, n_frames) + 0.5
    idx = np.searchsorted(centres, t)
    idx = np.clip(idx, 1, len(centres) - 1) if len(centres) > 1 else np.zeros_like(idx)
    if len(centres) > 1:
        left_closer = (t - centres[idx - 1]) <= (centres[idx] - t)
        idx = np.where(left_closer, idx - 1, idx)
    return pos_prob[idx], first
