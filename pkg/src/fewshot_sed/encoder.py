"""Conv-4 feature extractor with hand-written backpropagation.

Each block is a 3x3 'same' convolution, ReLU and 2x2 max-pool; the last
block is globally average-pooled into the embedding. Everything runs in
float64 so gradients can be checked against finite differences.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .functional import cross_entropy
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSENC\0"
CHECKPOINT_VERSION = 1
SEGMENT_FRAMES = 17
SEGMENT_HOP = 4


class ShapeError(ValueError):
    """Input does not match the encoder's configured segment shape."""


# --- layer primitives ------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # (B, H, W, C, 3, 3) -> rows of [ki, kj, c]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def conv_forward(x, w, b):
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(*x.shape[:3], w.shape[-1]), cols


def conv_backward(dout, cols, x_shape, w, need_dx=True):
    bsz, h, wd, c = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # one small matmul per kernel tap, added into the padded input gradient
    dxp = np.zeros((bsz, h + 2, wd + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += (d2 @ w[i, j].T).reshape(bsz, h, wd, c)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _phases(x):
    """The four 2x2 pooling phases (top-left, top-right, bottom-left, bottom-right)."""
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    return [x[:, i:2 * h2:2, j:2 * w2:2, :] for i in (0, 1) for j in (0, 1)]


def maxpool_forward(x):
    # idx is the first maximal phase, the same tie rule as argmax over the window
    a, b, c, d = _phases(x)
    top, bottom = np.maximum(a, b), np.maximum(c, d)
    out = np.maximum(top, bottom)
    idx = np.where(bottom > top, np.where(d > c, 3, 2), np.where(b > a, 1, 0)).astype(np.int8)
    return out, idx


def maxpool_backward(dout, idx, x_shape):
    dx = np.zeros(x_shape)
    for k, view in enumerate(_phases(dx)):
        view[...] = np.where(idx == k, dout, 0.0)
    return dx


# --- encoder ---------------------------------------------------------------

@dataclass
class Encoder:
    params: dict
    channels: tuple = (16, 32, 64, 64)
    in_shape: tuple = (SEGMENT_FRAMES, 128)
    seed: int = 0

    @classmethod
    def init(cls, channels=(16, 32, 64, 64), in_shape=(SEGMENT_FRAMES, 128), seed: int = 0) -> "Encoder":
        h, w = in_shape
        if min(h, w) >> len(channels) < 1:
            raise ValueError(f"input {in_shape} too small for {len(channels)} pooling stages")
        rng = np.random.default_rng(seed)
        params = {}
        c_in = 1
        for i, c_out in enumerate(channels):
            std = np.sqrt(1.0 / (9 * c_in))
            params[f"conv{i}.w"] = rng.normal(0.0, std, size=(3, 3, c_in, c_out))
            params[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        return cls(params, tuple(channels), tuple(in_shape), seed)

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def copy(self) -> "Encoder":
        return Encoder({k: v.copy() for k, v in self.params.items()},
                       self.channels, self.in_shape, self.seed)

    def with_params(self, params: dict) -> "Encoder":
        return Encoder(params, self.channels, self.in_shape, self.seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != tuple(self.in_shape):
            raise ShapeError(f"expected segments of shape {self.in_shape}, got {x.shape[1:]}")
        return x[..., None]

    def forward(self, segments, cache: bool = False):
        """Embed a batch (B, frames, mels) or a single segment (frames, mels)."""
        single = np.ndim(segments) == 2
        h = self._check(segments)
        caches = []
        for i in range(len(self.channels)):
            pre, cols = conv_forward(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            act = np.maximum(pre, 0.0)
            pooled, idx = maxpool_forward(act)
            if cache:
                caches.append((h.shape, cols, pre, idx))
            h = pooled
        out = h.mean(axis=(1, 2))
        if cache:
            return out, (caches, h.shape)
        return out[0] if single else out

    def backward(self, cache, grad_out: np.ndarray) -> dict:
        """Parameter gradients of sum_b <grad_out[b], f(x_b)>."""
        caches, last_shape = cache
        grad_out = np.atleast_2d(grad_out)
        b, hh, ww, c = last_shape
        g = np.broadcast_to(grad_out[:, None, None, :] / (hh * ww), last_shape)
        grads = {}
        for i in reversed(range(len(self.channels))):
            x_shape, cols, pre, idx = caches[i]
            g = maxpool_backward(g, idx, pre.shape)
            g = g * (pre > 0)
            g, dw, db = conv_backward(g, cols, x_shape, self.params[f"conv{i}.w"], need_dx=i > 0)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return grads

    def embed(self, segments: np.ndarray, batch_size: int = 256) -> np.ndarray:
        segments = np.asarray(segments)
        if segments.shape[0] == 0:
            return np.zeros((0, self.dim))
        return np.concatenate([self.forward(segments[i:i + batch_size])
                               for i in range(0, segments.shape[0], batch_size)])


@dataclass
class ClassificationHead:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, n_classes: int, dim: int, seed: int = 0) -> "ClassificationHead":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(1.0 / dim), size=(n_classes, dim)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return emb @ self.weights.T + self.bias

    def params(self) -> dict:
        return {"head.w": self.weights, "head.b": self.bias}

    @classmethod
    def from_params(cls, p: dict) -> "ClassificationHead":
        return cls(p["head.w"], p["head.b"])


def head_loss_and_grads(encoder: Encoder, head: ClassificationHead, segments, labels):
    """Cross-entropy through encoder + head; returns loss, encoder grads, head grads, logits."""
    emb, cache = encoder.forward(segments, cache=True)
    logits = head.logits(emb)
    loss, dlogits = cross_entropy(logits, labels)
    head_grads = {"head.w": dlogits.T @ emb, "head.b": dlogits.sum(axis=0)}
    enc_grads = encoder.backward(cache, dlogits @ head.weights)
    return loss, enc_grads, head_grads, logits


@dataclass
class TrainResult:
    encoder: Encoder
    head: ClassificationHead
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


def train_base(encoder: Encoder, head: ClassificationHead, segments: np.ndarray, labels,
               epochs: int = 15, lr: float = 1e-3, batch_size: int = 32, seed: int = 0) -> TrainResult:
    """Supervised cross-entropy training on base-class segments with Adam.

    Inputs are not modified; trained copies are returned with per-epoch mean
    loss and accuracy.
    """
    labels = np.asarray(labels, dtype=int)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("base training needs at least two classes")
    if labels.max() >= head.n_classes:
        raise ValueError("label index exceeds head size")

    rng = np.random.default_rng(seed)
    params = {**encoder.params, **head.params()}
    state = AdamState()
    result = TrainResult(encoder, head)
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            enc = encoder.with_params({k: params[k] for k in encoder.params})
            hd = ClassificationHead.from_params(params)
            loss, eg, hg, logits = head_loss_and_grads(enc, hd, segments[idx], labels[idx])
            params, state = adam_step(params, {**eg, **hg}, state, lr)
            total += loss * idx.size
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
        result.losses.append(total / n)
        result.accuracies.append(correct / n)
        log.info("base epoch %d loss %.4f acc %.3f", epoch + 1, total / n, correct / n)
    result.encoder = encoder.with_params({k: params[k] for k in encoder.params})
    result.head = ClassificationHead.from_params(params)
    return result


def accuracy(encoder: Encoder, head: ClassificationHead, segments, labels) -> float:
    pred = head.logits(encoder.embed(segments)).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


# --- checkpoint io ---------------------------------------------------------

def save_checkpoint(path, encoder: Encoder, head: ClassificationHead | None = None) -> None:
    """Binary checkpoint: magic, version, JSON architecture, named LE f64 tensors."""
    arch = json.dumps({"channels": list(encoder.channels), "in_shape": list(encoder.in_shape),
                       "seed": encoder.seed}).encode()
    tensors = dict(encoder.params)
    if head is not None:
        tensors.update(head.params())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<II", len(key), arr.ndim))
            fh.write(key)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[Encoder, ClassificationHead | None]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an encoder checkpoint")
        version, arch_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arch = json.loads(fh.read(arch_len))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            klen, ndim = struct.unpack("<II", fh.read(8))
            name = fh.read(klen).decode()
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    head = ClassificationHead.from_params(tensors) if "head.w" in tensors else None
    enc_params = {k: v for k, v in tensors.items() if k.startswith("conv")}
    encoder = Encoder(enc_params, tuple(arch["channels"]), tuple(arch["in_shape"]), arch["seed"])
    return encoder, head
