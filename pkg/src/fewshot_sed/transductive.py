"""Prototype classifier refined by transductive information maximization.

The classifier is a 2 x d weight matrix (row 0 = POS, row 1 = NEG) whose
rows start as support-set class means of the raw embeddings. Posteriors are
softmax(W z) on L2-normalized embeddings. Refinement minimizes

    L_w = lambda_ce * CE(support) - (H(Y_Q) - H(Y_Q | X_Q))

over W alone, with full-batch Adam; the encoder is never touched here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .functional import PROB_FLOOR, clamped_log, l2_normalize, one_hot, softmax, softmax_backward
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

POS, NEG = 0, 1
K = 2
LOSS_MODES = ("none", "ce", "mi", "ce+mi")


class EpisodeError(ValueError):
    pass


class DegenerateEpisodeError(FloatingPointError):
    pass


@dataclass
class Classifier:
    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != K:
            raise ValueError(f"classifier must be {K} x d, got {self.W.shape}")

    def copy(self) -> "Classifier":
        return Classifier(self.W.copy())


@dataclass
class Episode:
    """One few-shot task: labelled support and unlabelled query embeddings.

    ``support_raw`` holds f(x) before normalization (used for prototypes);
    ``support`` and ``query`` are unit-norm. The optional segment arrays keep
    the mel windows so the embeddings can be recomputed after fine-tuning.
    """
    support: np.ndarray
    labels: np.ndarray
    query: np.ndarray
    support_raw: np.ndarray
    support_segments: np.ndarray | None = None
    query_segments: np.ndarray | None = None
    source_id: str = ""
    support_frames: np.ndarray | None = None
    query_frames: np.ndarray | None = None
    encoder_checksum: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if not (np.any(self.labels == POS) and np.any(self.labels == NEG)):
            raise EpisodeError("support needs at least one POS and one NEG example")
        if len(self.query) == 0:
            raise EpisodeError("query set is empty")

    @classmethod
    def from_embeddings(cls, support_raw, labels, query_raw, **kwargs) -> "Episode":
        support_raw = np.asarray(support_raw, dtype=np.float64)
        return cls(l2_normalize(support_raw), labels, l2_normalize(np.asarray(query_raw, dtype=np.float64)),
                   support_raw, **kwargs)

    def reembed(self, encoder) -> "Episode":
        """Recompute all embeddings from the stored segments with ``encoder``."""
        if self.support_segments is None or self.query_segments is None:
            raise EpisodeError("episode has no raw segments to re-embed")
        return Episode.from_embeddings(
            encoder.embed(self.support_segments), self.labels, encoder.embed(self.query_segments),
            support_segments=self.support_segments, query_segments=self.query_segments,
            source_id=self.source_id, support_frames=self.support_frames,
            query_frames=self.query_frames, encoder_checksum=encoder.checksum())


@dataclass
class PosteriorTable:
    p: np.ndarray
    marginal: np.ndarray


def init_prototypes(support_raw, labels, normalize_prototypes: bool = False) -> Classifier:
    """Row k = mean of the raw support embeddings labelled k."""
    support_raw = np.asarray(support_raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    rows = []
    for k in range(K):
        members = support_raw[labels == k]
        if members.shape[0] == 0:
            raise EpisodeError(f"no support examples for class {k}")
        rows.append(members.mean(axis=0))
    W = np.stack(rows)
    if normalize_prototypes:
        W = l2_normalize(W)
    return Classifier(W)


def posterior(c: Classifier, z: np.ndarray) -> np.ndarray:
    """Softmax over w_k . z for a unit vector or a batch of them."""
    return softmax(np.asarray(z) @ c.W.T)


def marginal(c: Classifier, query: np.ndarray) -> np.ndarray:
    return posterior(c, query).mean(axis=0)


def posterior_table(c: Classifier, query: np.ndarray) -> PosteriorTable:
    p = posterior(c, query)
    return PosteriorTable(p, p.mean(axis=0))


def support_ce_from_p(p: np.ndarray, labels) -> float:
    y = one_hot(labels, p.shape[1])
    return float(-(y * clamped_log(p)).sum() / p.shape[0])


def support_ce(c: Classifier, support: np.ndarray, labels) -> float:
    return support_ce_from_p(posterior(c, support), labels)


def entropies(p: np.ndarray) -> tuple[float, float, float]:
    """(MI, marginal entropy, conditional entropy) of a posterior table."""
    pm = p.mean(axis=0)
    h_marg = float(-(pm * clamped_log(pm)).sum())
    h_cond = float(-(p * clamped_log(p)).sum() / p.shape[0])
    return h_marg - h_cond, h_marg, h_cond


def mutual_information(c: Classifier, query: np.ndarray) -> tuple[float, float, float]:
    return entropies(posterior(c, query))


def _weights(loss: str, lambda_ce: float) -> tuple[float, float]:
    if loss not in LOSS_MODES:
        raise ValueError(f"loss must be one of {LOSS_MODES}, got {loss!r}")
    w_ce = lambda_ce if loss in ("ce", "ce+mi") else 0.0
    w_mi = 1.0 if loss in ("mi", "ce+mi") else 0.0
    return w_ce, w_mi


def ti_loss(c: Classifier, support, labels, query, lambda_ce: float = 0.1, loss: str = "ce+mi") -> float:
    w_ce, w_mi = _weights(loss, lambda_ce)
    total = 0.0
    if w_ce:
        total += w_ce * support_ce(c, support, labels)
    if w_mi:
        total -= w_mi * mutual_information(c, query)[0]
    return total


def _dlog(p):
    """d/dp of p*log(max(p, floor)), matching the clamp used in the losses."""
    return np.where(p >= PROB_FLOOR, np.log(np.maximum(p, PROB_FLOOR)) + 1.0, np.log(PROB_FLOOR))


def ti_loss_grad(c: Classifier, support, labels, query, lambda_ce: float = 0.1,
                 loss: str = "ce+mi") -> np.ndarray:
    """Analytic dL_w/dW, shape (K, d)."""
    w_ce, w_mi = _weights(loss, lambda_ce)
    grad = np.zeros_like(c.W)
    if w_ce:
        p = posterior(c, support)
        y = one_hot(labels, K)
        g_p = -y * np.where(p >= PROB_FLOOR, 1.0 / np.maximum(p, PROB_FLOOR), 0.0) / p.shape[0]
        grad += w_ce * softmax_backward(p, g_p).T @ support
    if w_mi:
        p = posterior(c, query)
        n = p.shape[0]
        pm = p.mean(axis=0)
        # d(-H_marg)/dp_ik = dlog(pm_k)/n ;  d(H_cond)/dp_ik = -dlog(p_ik)/n
        g_p = (_dlog(pm)[None, :] - _dlog(p)) / n
        grad += w_mi * softmax_backward(p, g_p).T @ query
    return grad


@dataclass
class AdaptResult:
    classifier: Classifier
    table: PosteriorTable
    losses: list = field(default_factory=list)


def update_classifier(c: Classifier, episode: Episode, epochs: int = 20, lr: float = 1e-5,
                      lambda_ce: float = 0.1, loss: str = "ce+mi") -> AdaptResult:
    """Run ``epochs`` full-batch Adam steps on L_w; return W and final query posteriors.

    ``losses[e]`` is L_w before step e+1, with a final entry for the returned W.
    """
    if loss == "none":
        epochs = 0
    params = {"W": c.W.copy()}
    state = AdamState()
    losses = []
    for _ in range(epochs):
        cur = Classifier(params["W"])
        value = ti_loss(cur, episode.support, episode.labels, episode.query, lambda_ce, loss)
        if not np.isfinite(value):
            raise DegenerateEpisodeError(f"non-finite transductive loss in {episode.source_id or 'episode'}")
        losses.append(value)
        grad = ti_loss_grad(cur, episode.support, episode.labels, episode.query, lambda_ce, loss)
        params, state = adam_step(params, {"W": grad}, state, lr)
    final = Classifier(params["W"])
    if loss != "none":
        losses.append(ti_loss(final, episode.support, episode.labels, episode.query, lambda_ce, loss))
    return AdaptResult(final, posterior_table(final, episode.query), losses)
