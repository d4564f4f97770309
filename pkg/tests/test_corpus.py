import hashlib

import numpy as np
import pytest

from fewshot_sed.audio import segment_starts
from fewshot_sed.corpus import (CLASS_TEMPLATES, Annotation, CorpusManifest, ManifestEntry, SynthSpec,
                                build_episode, overlap_fraction, query_frame_posteriors, read_annotations,
                                synth_corpus, synth_file, write_annotations)
from fewshot_sed.encoder import Encoder
from fewshot_sed.transductive import NEG, POS, EpisodeError

FPS = 22050 / 256
ENC = Encoder.init(channels=(2, 2, 2, 4), in_shape=(17, 16), seed=0)


def frames_for(seconds, n_mels=16, seed=0):
    return np.random.default_rng(seed).normal(size=(int(seconds * FPS), n_mels))


def five_events():
    return [(1.0, 1.3), (2.0, 2.2), (3.0, 3.4), (4.0, 4.25), (5.0, 5.3)]


def brute_overlaps(seg_start, seg_len, events):
    a, b = seg_start / FPS, (seg_start + seg_len) / FPS
    return any(min(b, off) > max(a, on) for on, off in events)


# --- episodes -----------------------------------------------------------------

def test_episode_exactly_five_positives():
    frames = frames_for(10)
    ep = build_episode(frames, FPS, five_events(), ENC, neg_count=8, seed=0)
    pos_starts = ep.support_frames[ep.labels == POS]
    covered = set()
    for s in pos_starts:
        for j, (on, off) in enumerate(five_events()):
            inter = min((s + 17) / FPS, off) - max(s / FPS, on)
            if inter >= 0.5 * 17 / FPS - 1e-12:
                covered.add(j)
    assert covered == set(range(5))
    cutoff = five_events()[-1][1]
    assert np.all(ep.query_frames / FPS >= cutoff)
    expected = [s for s in segment_starts(len(frames), 17, 4) if s / FPS >= cutoff]
    assert ep.query_frames.tolist() == expected


def test_short_event_falls_back_to_centred_segment():
    events = [(1.0, 1.05)] + five_events()[1:]
    ep = build_episode(frames_for(10), FPS, events, ENC, seed=0)
    centre = int(round(1.025 * FPS - 8.5))
    assert centre in ep.support_frames[ep.labels == POS].tolist()


def test_neg_sampling_deterministic_and_seeded():
    frames = frames_for(10)
    a = build_episode(frames, FPS, five_events(), ENC, neg_count=6, seed=3)
    b = build_episode(frames, FPS, five_events(), ENC, neg_count=6, seed=3)
    c = build_episode(frames, FPS, five_events(), ENC, neg_count=6, seed=4)
    assert a.support_frames.tolist() == b.support_frames.tolist()
    np.testing.assert_array_equal(a.support, b.support)
    assert a.support_frames.tolist() != c.support_frames.tolist()


@pytest.mark.parametrize("region", ["before_fifth", "anywhere"])
def test_negatives_never_touch_positives(region):
    rng = np.random.default_rng(1)
    for trial in range(20):
        t, events = 0.3, []
        while t < 18:
            d = rng.uniform(0.1, 0.4)
            events.append((t, t + d))
            t += d + rng.uniform(0.3, 1.5)
        frames = frames_for(20, seed=trial)
        ep = build_episode(frames, FPS, events, ENC, neg_count=10, seed=trial, neg_region=region)
        negs = ep.support_frames[ep.labels == NEG]
        assert len(negs) == min(10, len(negs)) and len(negs) > 0
        for s in negs:
            assert not brute_overlaps(s, 17, events)
            if region == "before_fifth":
                assert (s + 17) / FPS <= sorted(events)[4][1]


def test_episode_errors():
    with pytest.raises(EpisodeError):
        build_episode(frames_for(10), FPS, five_events()[:4], ENC)
    # positives packed so densely that nothing before the fifth offset is free
    packed = [(i * 0.2, i * 0.2 + 0.2) for i in range(5)]
    with pytest.raises(EpisodeError):
        build_episode(frames_for(10), FPS, packed, ENC)
    with pytest.raises(EpisodeError):
        build_episode(frames_for(5.35), FPS, five_events(), ENC)


def test_overlap_fraction_hand_case():
    frac = overlap_fraction([0], 10, 10.0, [(0.5, 2.0)])
    assert frac[0] == pytest.approx(0.5)


def test_query_frame_posteriors_nearest_centre():
    starts = np.array([10, 14, 18])
    probs, first = query_frame_posteriors(np.array([0.1, 0.5, 0.9]), starts, 4, 24)
    assert first == 10 and probs.size == 14
    centres = starts + 2.0
    for k, v in enumerate(probs):
        t = first + k + 0.5
        assert v == [0.1, 0.5, 0.9][int(np.argmin(np.abs(centres - t)))]


# --- synthetic corpus ---------------------------------------------------------

def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_byte_identical(tmp_path):
    spec = SynthSpec(n_files=2, n_base_files=2, duration=12, base_duration=4, seed=5)
    synth_corpus(spec, tmp_path / "a")
    synth_corpus(spec, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    synth_corpus(SynthSpec(n_files=2, n_base_files=2, duration=12, base_duration=4, seed=6), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_synth_splits_and_annotations(tmp_path):
    m = synth_corpus(SynthSpec(n_files=3, n_base_files=3, class_count=8, seed=1), tmp_path)
    loaded = CorpusManifest.load(tmp_path / "manifest.json")
    assert len(loaded.files("base")) == 3 and len(loaded.files("test")) == 3
    base_labels = {a.label for e in m.files("base") for a in read_annotations(m.path(e.annotations))}
    assert base_labels <= {f"class{c:02d}" for c in range(4)}
    for e in m.files("test"):
        anns = read_annotations(m.path(e.annotations))
        assert len(anns) >= 5 and {a.label for a in anns} == {"POS"}
        assert m.path(e.audio).exists()


def test_synth_rejects_bad_class_count(tmp_path):
    with pytest.raises(ValueError):
        synth_corpus(SynthSpec(class_count=len(CLASS_TEMPLATES) + 1), tmp_path)


def energy_events(clean, sr=22050, hop=256, thresh=1e-3):
    n = clean.size // hop
    rms = np.sqrt((clean[: n * hop].reshape(n, hop) ** 2).mean(axis=1))
    active = np.concatenate([[False], rms > thresh, [False]])
    edges = np.flatnonzero(np.diff(active.astype(int)))
    return [(a, b) for a, b in edges.reshape(-1, 2)]


def test_annotations_match_clean_energy_detector():
    rng = np.random.default_rng(7)
    events = [(c, (a, a + d)) for c, a, d in [(0, 0.5, 0.2), (3, 1.3, 0.35), (6, 2.4, 0.15), (9, 3.1, 0.4)]]
    _, clean = synth_file(events, 4.0, 10.0, 22050, rng)
    detected = energy_events(clean)
    assert len(detected) == len(events)
    for (on_f, off_f), (_, (a, b)) in zip(detected, events):
        assert abs(on_f - a * FPS) <= 1 and abs(off_f - b * FPS) <= 1


def test_snr_sets_noise_level():
    rng = np.random.default_rng(0)
    mix, clean = synth_file([(0, (0.5, 1.5))], 2.0, 20.0, 22050, rng)
    noise = mix - clean
    ev = clean[int(0.5 * 22050):int(1.5 * 22050)]
    ratio = 20 * np.log10(np.sqrt((ev ** 2).mean()) / np.sqrt((noise ** 2).mean()))
    assert ratio == pytest.approx(20.0, abs=0.5)


def test_annotation_roundtrip_and_validation(tmp_path):
    rows = [Annotation("a.wav", 0.5, 1.0, "POS"), Annotation("a.wav", 2.0, 2.5, "class03")]
    write_annotations(tmp_path / "x.csv", rows)
    assert read_annotations(tmp_path / "x.csv") == rows
    with pytest.raises(ValueError):
        Annotation("a.wav", 1.0, 1.0, "POS")


def test_manifest_rejects_unknown_split(tmp_path):
    (tmp_path / "m.json").write_text('{"files": [{"audio": "a.wav", "annotations": "a.csv", "split": "dev"}]}')
    with pytest.raises(ValueError):
        CorpusManifest.load(tmp_path / "m.json")


def test_manifest_roundtrip(tmp_path):
    m = CorpusManifest([ManifestEntry("audio/a.wav", "ann/a.csv", "base")], "stats.npz", tmp_path)
    m.save(tmp_path / "manifest.json")
    back = CorpusManifest.load(tmp_path / "manifest.json")
    assert back.entries == m.entries and back.norm_stats == "stats.npz"
