"""
Supervised contrastive loss over character embeddings, the teacher-forced ASR
loss, and their weighted combination.

Positives are any two candidates with the same letter label, whatever word,
utterance or augmented view they come from. Every other candidate except the
anchor itself sits in the denominator.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from corpus import PAD, VOCAB_SIZE, Vocab
from errors import ContractError, DimensionError
from model import BatchForward
from numerics import Tensor

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.07
DEFAULT_CAP = 20


@dataclass(eq=False)
class CharEmbedding:
    """One projected character; the vector is `y`, or row `row` of a shared `source` matrix"""
    y: Optional[Tensor]
    label: int
    utterance_id: str = ""
    view_tag: str = "original"
    position: int = 0
    source: Optional[Tensor] = None
    row: int = -1

    @property
    def vector(self) -> np.ndarray:
        return self.y.data if self.y is not None else self.source.data[self.row]

    @property
    def normalized(self) -> np.ndarray:
        v = self.vector
        return v / np.linalg.norm(v)


@dataclass(eq=False)
class PairBatch:
    candidates: List[CharEmbedding]
    positive_pairs: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.positive_pairs

    def matrix(self) -> Tensor:
        """Raw candidate vectors stacked M x P (still attached to the graph)"""
        if all(c.y is None for c in self.candidates) and len({id(c.source) for c in self.candidates}) == 1:
            return nx.take(self.candidates[0].source, np.array([c.row for c in self.candidates]))
        return nx.stack([c.y if c.y is not None else nx.row(c.source, c.row) for c in self.candidates])


@dataclass
class LossValues:
    asr: float
    con: float
    total: float
    alpha: float
    pair_count: int
    no_positives: bool = False


def embeddings_from_projection(proj: Tensor, target: Sequence[int], utterance_id: str,
                               view_tag: str) -> List[CharEmbedding]:
    """One CharEmbedding per decoder position; row i predicts target[i + 1]"""
    return [CharEmbedding(nx.row(proj, i), int(target[i + 1]), utterance_id, view_tag, i)
            for i in range(proj.shape[0])]


def embeddings_from_batch(out: BatchForward, utterance_ids: Sequence[str],
                          view_tags: Sequence[str]) -> List[CharEmbedding]:
    """Every real decoder position of a batched forward, backed by one gathered K x P matrix"""
    steps, utts = out.positions()
    flat = nx.take(out.proj, (steps, utts))
    return [CharEmbedding(None, int(out.targets[b, s + 1]), utterance_ids[b], view_tags[b], int(s), flat, k)
            for k, (s, b) in enumerate(zip(steps, utts))]


def mine_pairs(embeddings: Sequence[CharEmbedding], cap_per_class: int = DEFAULT_CAP,
               rng: Optional[np.random.Generator] = None) -> PairBatch:
    """Keep letter-labelled embeddings and pair every two sharing a letter, capped per letter"""
    rng = rng if rng is not None else np.random.default_rng(0)
    candidates = [e for e in embeddings if Vocab.is_letter(e.label)]
    by_label: Dict[int, List[int]] = defaultdict(list)
    for idx, emb in enumerate(candidates):
        by_label[emb.label].append(idx)

    pairs: List[Tuple[int, int]] = []
    for label in sorted(by_label):
        class_pairs = list(combinations(by_label[label], 2))
        if cap_per_class is not None and len(class_pairs) > cap_per_class:
            keep = np.sort(rng.choice(len(class_pairs), size=cap_per_class, replace=False))
            class_pairs = [class_pairs[int(k)] for k in keep]
        pairs.extend(class_pairs)

    if not pairs:
        logger.debug(f"No positive pairs among {len(candidates)} candidates")
    return PairBatch(candidates, pairs)


def _similarity_logits(batch: PairBatch, tau: float) -> Tensor:
    if tau <= 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    if len(batch.candidates) < 2:
        raise ContractError(f"contrastive loss needs at least 2 candidates, got {len(batch.candidates)}")
    z = nx.l2_normalize(batch.matrix())
    return nx.scale(nx.matmul(z, nx.transpose(z)), 1.0 / tau)


def _anchor_mask(m: int) -> np.ndarray:
    mask = np.ones((m, m), dtype=bool)
    np.fill_diagonal(mask, False)
    return mask


def contrastive_pair_loss(anchor_idx: int, pos_idx: int, batch: PairBatch, tau: float = DEFAULT_TAU) -> Tensor:
    """-log( exp(sim(n,m)/tau) / sum_{k != n} exp(sim(n,k)/tau) )"""
    m = len(batch.candidates)
    if len(batch.candidates) < 2:
        raise ContractError(f"contrastive loss needs at least 2 candidates, got {m}")
    if not (0 <= anchor_idx < m and 0 <= pos_idx < m) or anchor_idx == pos_idx:
        raise ContractError(f"invalid pair ({anchor_idx}, {pos_idx}) for {m} candidates")
    logits = _similarity_logits(batch, tau)
    anchor_row = nx.row(logits, anchor_idx)
    mask = np.ones(m, dtype=bool)
    mask[anchor_idx] = False
    return nx.scale(nx.take(nx.log_softmax(anchor_row, mask), pos_idx), -1.0)


def contrastive_loss(batch: PairBatch, tau: float = DEFAULT_TAU) -> Tensor:
    """Mean of the anchored pair losses, each positive pair anchored both ways; 0 when no positives"""
    if batch.is_empty:
        logger.warning("Contrastive loss over a batch without positive pairs; contributing 0")
        return Tensor(0.0)
    logits = _similarity_logits(batch, tau)
    log_probs = nx.log_softmax(logits, _anchor_mask(len(batch.candidates)))
    anchors = np.array([a for a, b in batch.positive_pairs] + [b for a, b in batch.positive_pairs])
    partners = np.array([b for a, b in batch.positive_pairs] + [a for a, b in batch.positive_pairs])
    return nx.scale(nx.mean(nx.take(log_probs, (anchors, partners))), -1.0)


def asr_loss(asr_logprobs: Tensor, target: Sequence[int]) -> Tensor:
    """Teacher-forced NLL of target[1:], PAD excluded, averaged per character"""
    target = [int(t) for t in target]
    length = len(target) - 1
    if asr_logprobs.ndim != 2 or asr_logprobs.shape != (length, VOCAB_SIZE):
        raise DimensionError(f"log-probs of shape {asr_logprobs.shape} do not match a target of "
                             f"{length} predicted positions")
    rows = np.array([i for i in range(length) if target[i + 1] != PAD])
    if rows.size == 0:
        raise ContractError("target has no non-PAD positions")
    cols = np.array([target[i + 1] for i in rows])
    return nx.scale(nx.sum(nx.take(asr_logprobs, (rows, cols))), -1.0 / rows.size)


def batch_asr_loss(out: BatchForward) -> Tensor:
    """Mean over utterances of each one's per-character NLL (asr_loss averaged across the batch)"""
    steps, utts = out.positions()
    n = out.targets.shape[0]
    counts = np.bincount(utts, minlength=n)
    weights = Tensor(1.0 / (counts[utts] * n))
    picked = nx.take(out.asr_logprobs, (steps, utts, out.targets[utts, steps + 1]))
    return nx.scale(nx.sum(picked * weights), -1.0)


def total_loss(asr: Tensor, con: Tensor, alpha: float) -> Tensor:
    """asr + alpha·con; with alpha == 0 the contrastive branch is left out of the graph"""
    if alpha == 0:
        return asr
    return asr + nx.scale(con, alpha)
