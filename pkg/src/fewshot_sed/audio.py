"""Audio ingest and log-mel front end.

Raw audio is resampled to 22.05 kHz, framed with a 1024-sample Hann window
(hop 256, ~86 frames/s), projected onto 128 triangular mel filters and
log-compressed. Frames are then standardized per mel bin with statistics
taken from the training split.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 22050
WINDOW_LEN = 1024
HOP = 256
N_MELS = 128
LOG_EPS = 1e-10
STD_FLOOR = 1e-5

DUMP_MAGIC = b"MELF"


class WavDecodeError(ValueError):
    """The file is not a readable RIFF/WAV container."""


class UnsupportedFormatError(ValueError):
    """The WAV container holds an encoding other than PCM16 or float32."""


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("WaveBuffer needs a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("WaveBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    frame_rate: float
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("MelSpectrogram frames must be a non-empty T x B matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray = field()

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "NormStats":
        with np.load(path) as data:
            return cls(data["mean"], data["std"])


def load_wav(path) -> WaveBuffer:
    """Read a PCM16 or float32 WAV file into a mono buffer in [-1, 1]."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error) as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise WavDecodeError(f"{path}: {msg}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise WavDecodeError(f"{path}: no audio frames")
    return WaveBuffer(samples, rate)


def write_wav(path, w: WaveBuffer) -> None:
    """Write a buffer as 16-bit PCM (clipped to the representable range)."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), w.sample_rate, pcm)


def resample(w: WaveBuffer, target_rate: int = SAMPLE_RATE) -> WaveBuffer:
    """Polyphase windowed-sinc resampling; identity when the rates agree."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return WaveBuffer(w.samples.copy(), w.sample_rate)
    g = gcd(int(target_rate), w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down)
    return WaveBuffer(out, target_rate)


def n_stft_frames(n_samples: int, window_len: int = WINDOW_LEN, hop: int = HOP) -> int:
    padded = max(n_samples, window_len) + window_len
    return 1 + (padded - window_len) // hop


def stft(w: WaveBuffer | np.ndarray, window_len: int = WINDOW_LEN, hop: int = HOP) -> np.ndarray:
    """Magnitude STFT, shape (T, window_len // 2 + 1).

    The signal is zero-padded up to one window if shorter, then reflect-padded
    by window_len // 2 on both sides so frame t is centred on sample t * hop.
    """
    if window_len <= 0 or window_len & (window_len - 1):
        raise ValueError("window_len must be a power of two")
    if not 0 < hop <= window_len:
        raise ValueError("hop must be in (0, window_len]")
    x = w.samples if isinstance(w, WaveBuffer) else np.asarray(w, dtype=np.float64)
    if x.size < window_len:
        x = np.pad(x, (0, window_len - x.size))
    half = window_len // 2
    x = np.pad(x, (half, half), mode="reflect")
    n_frames = 1 + (x.size - window_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop][:n_frames]
    window = get_window("hann", window_len, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters with unit peak, shape (n_mels, n_fft_bins)."""
    if n_mels >= n_fft_bins:
        raise ValueError("n_mels must be smaller than n_fft_bins")
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - centre)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = bank.sum(axis=1) == 0
    if np.any(empty):
        # filter narrower than the bin spacing: fall back to the nearest bin
        idx = np.abs(fft_freqs[None, :] - centre[empty]).argmin(axis=1)
        bank[np.flatnonzero(empty), idx] = 1.0
    return bank


def filter_centres(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def mel_spectrogram(w: WaveBuffer, n_mels: int = N_MELS, window_len: int = WINDOW_LEN,
                    hop: int = HOP, source_id: str = "") -> MelSpectrogram:
    """log(mel-filtered power spectrum + 1e-10)."""
    mag = stft(w, window_len, hop)
    bank = mel_filterbank(mag.shape[1], n_mels, w.sample_rate)
    mel = (mag ** 2) @ bank.T
    return MelSpectrogram(np.log(mel + LOG_EPS), w.sample_rate / hop, source_id)


def features_from_file(path, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS,
                       window_len: int = WINDOW_LEN, hop: int = HOP) -> MelSpectrogram:
    w = resample(load_wav(path), sample_rate)
    return mel_spectrogram(w, n_mels, window_len, hop, source_id=Path(path).stem)


def compute_norm_stats(train: Iterable[MelSpectrogram]) -> NormStats:
    """Per-bin mean and population std over every frame of the training set."""
    mats = [m.frames for m in train]
    if not mats:
        raise ValueError("training set is empty")
    count = sum(m.shape[0] for m in mats)
    mean = sum(m.sum(axis=0) for m in mats) / count
    var = sum(((m - mean) ** 2).sum(axis=0) for m in mats) / count
    return NormStats(mean, np.sqrt(var))


def normalize(m: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    return MelSpectrogram((m.frames - stats.mean) / stats.std, m.frame_rate, m.source_id)


def dump_matrix(path, matrix: np.ndarray) -> None:
    """Write magic, rows/cols as little-endian u32, then row-major f32 data."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("dump_matrix expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<II", *matrix.shape))
        fh.write(matrix.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != DUMP_MAGIC:
            raise WavDecodeError(f"{path}: not a feature dump")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise WavDecodeError(f"{path}: truncated feature dump")
    return data.reshape(rows, cols)


def segment_starts(n_frames: int, seg_len: int, seg_hop: int) -> np.ndarray:
    """Start frames of a sliding window; always yields at least one start."""
    if n_frames <= seg_len:
        return np.zeros(1, dtype=int)
    return np.arange(0, n_frames - seg_len + 1, seg_hop)


def extract_segments(frames: np.ndarray, starts: Sequence[int], seg_len: int) -> np.ndarray:
    """Stack (len(starts), seg_len, B) windows, edge-padding past the end."""
    starts = np.asarray(starts, dtype=int)
    need = int(starts.max()) + seg_len if starts.size else seg_len
    if frames.shape[0] < need:
        frames = np.pad(frames, ((0, need - frames.shape[0]), (0, 0)), mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(frames, seg_len, axis=0)
    return np.ascontiguousarray(view[starts].transpose(0, 2, 1))
