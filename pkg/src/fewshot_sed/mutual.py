"""Mutual learning: fine-tune the encoder against the refined classifier.

Each iteration takes confident query predictions as pseudo-labels, trains
the encoder (plus a fresh binary dense head) on

    L_f = lambda1 * CE(head, pseudo-labels + support) + lambda2 * L_c

where L_c pulls the positive prototype of the refined classifier towards the
mean POS support embedding and away from negatives, then re-embeds the
episode and re-runs transductive adaptation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .encoder import ClassificationHead, Encoder
from .functional import cross_entropy
from .optim import AdamState, adam_step
from .transductive import (NEG, POS, Classifier, Episode, PosteriorTable,
                           init_prototypes, update_classifier)

log = logging.getLogger(__name__)


@dataclass
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return int(self.indices.size)


def select_confident(table: PosteriorTable, tau: float = 0.8) -> PseudoLabelSet:
    """Query items whose top posterior reaches ``tau``; label is the argmax."""
    if not 0.5 < tau <= 1.0:
        raise ValueError("tau must lie in (0.5, 1]")
    conf = table.p.max(axis=1)
    keep = np.flatnonzero(conf >= tau)
    return PseudoLabelSet(keep, table.p[keep].argmax(axis=1), conf[keep])


def _cos_and_grad(a: np.ndarray, V: np.ndarray):
    """Cosine of ``a`` with each row of V and d cos / d row."""
    na = np.linalg.norm(a)
    nv = np.linalg.norm(V, axis=1)
    if na == 0 or np.any(nv == 0):
        raise ValueError("degenerate similarity: zero-norm vector")
    ah = a / na
    Vh = V / nv[:, None]
    s = Vh @ ah
    return s, (ah[None, :] - s[:, None] * Vh) / nv[:, None]


def contrastive_loss(w_pos: np.ndarray, z_pos_mean: np.ndarray, negatives: np.ndarray) -> float:
    """-log( exp(cos(w, z_pos)) / sum_k exp(cos(w, z_neg_k)) ).

    The positive pair is absent from the denominator, so the value can be
    negative (down to -2 for N = 1).
    """
    negatives = np.atleast_2d(negatives)
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative")
    s_pos, _ = _cos_and_grad(w_pos, z_pos_mean[None, :])
    s_neg, _ = _cos_and_grad(w_pos, negatives)
    m = s_neg.max()
    return float(-s_pos[0] + m + np.log(np.exp(s_neg - m).sum()))


def contrastive_grad(w_pos, z_pos_mean, negatives):
    """(L_c, dL/dz_pos_mean, dL/dnegatives)."""
    negatives = np.atleast_2d(negatives)
    s_pos, g_pos = _cos_and_grad(w_pos, z_pos_mean[None, :])
    s_neg, g_neg = _cos_and_grad(w_pos, negatives)
    m = s_neg.max()
    e = np.exp(s_neg - m)
    loss = float(-s_pos[0] + m + np.log(e.sum()))
    soft = e / e.sum()
    return loss, -g_pos[0], soft[:, None] * g_neg


def finetune_loss(ce_pseudo: float, l_c: float, lambda1: float = 0.5, lambda2: float = 0.5) -> float:
    return lambda1 * ce_pseudo + lambda2 * l_c


def finetune_objective(encoder: Encoder, head: ClassificationHead, w_pos: np.ndarray,
                       ce_segments, ce_labels, pos_segments, neg_segments,
                       lambda1: float = 0.5, lambda2: float = 0.5):
    """L_f with gradients for encoder and head parameters.

    Returns (loss, ce, l_c, encoder_grads, head_grads).
    """
    n_ce, n_pos = len(ce_segments), len(pos_segments)
    bank = np.concatenate([ce_segments, pos_segments, neg_segments])
    slots = np.arange(len(bank))
    return _objective_on_bank(encoder, head, w_pos, bank, slots[:n_ce], ce_labels,
                              slots[n_ce:n_ce + n_pos], slots[n_ce + n_pos:], lambda1, lambda2)


def _objective_on_bank(encoder, head, w_pos, bank, ce_idx, ce_labels, pos_idx, neg_idx, lambda1, lambda2):
    # A segment may serve as a CE item and a contrastive negative in the same
    # step; it is embedded once and its gradient contributions are summed.
    n_ce, n_pos = len(ce_idx), len(pos_idx)
    uniq, inv = np.unique(np.concatenate([ce_idx, pos_idx, neg_idx]), return_inverse=True)
    emb_u, cache = encoder.forward(bank[uniq], cache=True)
    emb = emb_u[inv]
    e_ce, e_pos, e_neg = emb[:n_ce], emb[n_ce:n_ce + n_pos], emb[n_ce + n_pos:]

    g_emb = np.zeros_like(emb)
    logits = head.logits(e_ce)
    ce, dlogits = cross_entropy(logits, ce_labels)
    head_grads = {"head.w": lambda1 * dlogits.T @ e_ce, "head.b": lambda1 * dlogits.sum(axis=0)}
    g_emb[:n_ce] = lambda1 * dlogits @ head.weights

    z_mean = e_pos.mean(axis=0)
    l_c, g_mean, g_neg = contrastive_grad(w_pos, z_mean, e_neg)
    g_emb[n_ce:n_ce + n_pos] = lambda2 * g_mean[None, :] / n_pos
    g_emb[n_ce + n_pos:] = lambda2 * g_neg

    g_u = np.zeros_like(emb_u)
    np.add.at(g_u, inv, g_emb)
    enc_grads = encoder.backward(cache, g_u)
    return finetune_loss(ce, l_c, lambda1, lambda2), ce, l_c, enc_grads, head_grads


@dataclass
class FinetuneResult:
    encoder: Encoder
    losses: list = field(default_factory=list)
    skipped: bool = False


def finetune_encoder(encoder: Encoder, classifier: Classifier, episode: Episode, pseudo: PseudoLabelSet,
                     epochs: int = 5, lr_encoder: float = 1e-4, lr_head: float = 1e-3,
                     lambda1: float = 0.5, lambda2: float = 0.5, negatives_cap: int = 64,
                     batch_size: int = 32, include_support: bool = True, seed: int = 0) -> FinetuneResult:
    """Adam fine-tuning of a copy of ``encoder``; ``classifier`` is read only.

    CE items are the pseudo-labelled queries (plus labelled support when
    ``include_support``). Contrastive negatives are drawn per step, without
    replacement and capped at ``negatives_cap``, from NEG support and NEG
    pseudo-labelled queries.
    """
    if len(pseudo) == 0:
        log.info("%s: no confident queries, fine-tuning skipped", episode.source_id)
        return FinetuneResult(encoder, skipped=True)
    if episode.support_segments is None or episode.query_segments is None:
        raise ValueError("fine-tuning needs the episode's raw segments")

    rng = np.random.default_rng(seed)
    w_pos = classifier.W[POS].copy()
    q_seg, s_seg = episode.query_segments, episode.support_segments
    # bank rows: pseudo-labelled queries, then the support set
    n_pseudo = len(pseudo)
    bank = np.concatenate([q_seg[pseudo.indices], s_seg])
    support_rows = n_pseudo + np.arange(len(s_seg))
    ce_rows = np.arange(n_pseudo)
    ce_y = pseudo.labels
    if include_support:
        ce_rows = np.concatenate([ce_rows, support_rows])
        ce_y = np.concatenate([ce_y, episode.labels])
    pos_rows = support_rows[episode.labels == POS]
    neg_pool = np.concatenate([support_rows[episode.labels == NEG], np.flatnonzero(pseudo.labels == NEG)])

    head = ClassificationHead.init(2, encoder.dim, seed=seed)
    enc_params = dict(encoder.params)
    head_params = head.params()
    enc_state, head_state = AdamState(), AdamState()
    losses = []
    n = len(ce_y)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            n_neg = min(negatives_cap, len(neg_pool))
            neg_idx = np.sort(rng.choice(len(neg_pool), size=n_neg, replace=False))
            loss, _, _, eg, hg = _objective_on_bank(
                encoder.with_params(enc_params), ClassificationHead.from_params(head_params), w_pos,
                bank, ce_rows[idx], ce_y[idx], pos_rows, neg_pool[neg_idx], lambda1, lambda2)
            enc_params, enc_state = adam_step(enc_params, eg, enc_state, lr_encoder)
            head_params, head_state = adam_step(head_params, hg, head_state, lr_head)
            total += loss * idx.size
        losses.append(total / n)
    return FinetuneResult(encoder.with_params(enc_params), losses)


@dataclass
class IterationRecord:
    iteration: int
    ti_losses: list
    finetune_losses: list = field(default_factory=list)
    finetune_skipped: bool = False
    n_pseudo: int = 0
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "ti_losses": self.ti_losses,
                "finetune_losses": self.finetune_losses, "finetune_skipped": self.finetune_skipped,
                "n_pseudo": self.n_pseudo, "metrics": self.metrics}


@dataclass
class MutualLearningReport:
    records: list
    table: PosteriorTable
    classifier: Classifier
    encoder: Encoder


def mutual_learning_loop(episode: Episode, encoder: Encoder, iterations: int = 1, *,
                         ti_epochs: int = 20, ti_lr: float = 1e-5, lambda_ce: float = 0.1,
                         loss: str = "ce+mi", normalize_prototypes: bool = False,
                         tau: float = 0.8, ft_epochs: int = 5, lr_encoder: float = 1e-4,
                         lr_head: float = 1e-3, lambda1: float = 0.5, lambda2: float = 0.5,
                         negatives_cap: int = 64, include_support: bool = True, batch_size: int = 32,
                         seed: int = 0, evaluate: Callable[[PosteriorTable], dict] | None = None) -> MutualLearningReport:
    """Iteration 0 is transductive adaptation alone; every later iteration
    fine-tunes a copy of the encoder, re-embeds the episode, rebuilds the
    prototypes and adapts again. ``evaluate`` maps query posteriors to metrics
    recorded per iteration.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")

    def adapt(ep):
        c0 = init_prototypes(ep.support_raw, ep.labels, normalize_prototypes)
        return update_classifier(c0, ep, ti_epochs, ti_lr, lambda_ce, loss)

    result = adapt(episode)
    rec = IterationRecord(0, result.losses)
    if evaluate:
        rec.metrics = evaluate(result.table)
    records = [rec]
    current = encoder
    for it in range(1, iterations + 1):
        pseudo = select_confident(result.table, tau)
        ft = finetune_encoder(current, result.classifier, episode, pseudo, ft_epochs, lr_encoder, lr_head,
                              lambda1, lambda2, negatives_cap, batch_size, include_support,
                              seed=seed + it)
        if not ft.skipped:
            current = ft.encoder
            episode = episode.reembed(current)
            result = adapt(episode)
        rec = IterationRecord(it, result.losses, ft.losses, ft.skipped, len(pseudo))
        if evaluate:
            rec.metrics = evaluate(result.table)
        records.append(rec)
    return MutualLearningReport(records, result.table, result.classifier, current)
