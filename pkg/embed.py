"""
Character representation export, 2-D PCA projection and letter clustering metrics.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px

from corpus import VOCAB, Utterance, Vocab
from errors import DegenerateDataError, MetricError
from model import ModelParams, forward_teacher_forced

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class EmbeddingDump:
    h: np.ndarray
    utterance_ids: List[str] = field(default_factory=list)
    accent_ids: List[str] = field(default_factory=list)
    positions: List[int] = field(default_factory=list)
    letters: List[str] = field(default_factory=list)
    checkpoint_id: str = ""

    def __len__(self) -> int:
        return int(self.h.shape[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "utterance_id": self.utterance_ids,
            "accent_id": self.accent_ids,
            "position": self.positions,
            "letter": self.letters,
            "h": [",".join(repr(float(x)) for x in row) for row in self.h],
        })


def sample_utterances(utterances: Sequence[Utterance], limit: int = 100, seed: int = 0) -> List[Utterance]:
    """Seeded sample without replacement, kept in input order"""
    if limit >= len(utterances):
        return list(utterances)
    idx = np.sort(np.random.default_rng(seed).choice(len(utterances), size=limit, replace=False))
    return [utterances[int(i)] for i in idx]


def export_embeddings(utterances: Sequence[Utterance], params: ModelParams, limit: int = 100,
                      seed: int = 0) -> EmbeddingDump:
    """Teacher-forced decoder states h at every letter position of a sampled utterance set"""
    weights = params.bind(False)
    rows, utt_ids, accents, positions, letters = [], [], [], [], []
    for utt in sample_utterances(utterances, limit, seed):
        h = forward_teacher_forced(utt.frames, utt.target, weights).h.data
        for i in range(h.shape[0]):
            label = int(utt.target[i + 1])
            if not Vocab.is_letter(label):
                continue
            rows.append(h[i])
            utt_ids.append(utt.utt_id)
            accents.append(utt.accent_id)
            positions.append(i)
            letters.append(VOCAB.labels[label])
    hidden = params.config.hidden
    dump = EmbeddingDump(np.array(rows).reshape(len(rows), hidden), utt_ids, accents, positions, letters,
                         params.checkpoint_id)
    logger.info(f"Exported {len(dump)} letter embeddings from {len(set(utt_ids))} utterances")
    return dump


def write_dump(dump: EmbeddingDump, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"# H={dump.h.shape[1]};count={len(dump)};checkpoint={dump.checkpoint_id}\n")
        dump.to_frame().to_csv(f, index=False)


def read_dump(path: str) -> EmbeddingDump:
    with open(path) as f:
        header = f.readline().lstrip("# ").strip()
    meta = dict(item.split("=", 1) for item in header.split(";"))
    hidden = int(meta["H"])
    frame = pd.read_csv(path, skiprows=1, dtype={"utterance_id": str, "accent_id": str, "letter": str, "h": str},
                        keep_default_na=False)
    h = np.array([[float(x) for x in s.split(",")] for s in frame["h"]]).reshape(len(frame), hidden)
    return EmbeddingDump(h, frame["utterance_id"].tolist(), frame["accent_id"].tolist(),
                         [int(p) for p in frame["position"]], frame["letter"].tolist(), meta["checkpoint"])


# ======================================================
# PCA
# ======================================================

class PCAResult(NamedTuple):
    coords: np.ndarray
    components: np.ndarray
    variances: np.ndarray


def _sign_fix(components: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = components.copy()
    for k in range(out.shape[1]):
        nonzero = np.flatnonzero(np.abs(out[:, k]) > tol)
        if nonzero.size and out[nonzero[0], k] < 0:
            out[:, k] = -out[:, k]
    return out


def pca2(data, max_iter: int = 10000, tol: float = 1e-14) -> PCAResult:
    """Mean-centred projection onto the top two principal directions via orthogonal iteration"""
    x = data.h if isinstance(data, EmbeddingDump) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DegenerateDataError(f"PCA needs at least 3 rows, got {x.shape}")
    xc = x - x.mean(axis=0)
    if x.shape[1] < 2 or np.linalg.matrix_rank(xc) < 2:
        raise DegenerateDataError("data has rank < 2; no second principal direction")
    cov = xc.T @ xc / (x.shape[0] - 1)

    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((cov.shape[0], 2)))
    for _ in range(max_iter):
        q_next, _ = np.linalg.qr(cov @ q)
        # subspace change measured on the projector, immune to sign/rotation
        if np.linalg.norm(q_next @ q_next.T - q @ q.T) < tol:
            q = q_next
            break
        q = q_next

    small = q.T @ cov @ q
    evals, evecs = np.linalg.eigh((small + small.T) / 2.0)
    order = np.argsort(evals)[::-1]
    components = _sign_fix(q @ evecs[:, order])
    return PCAResult(xc @ components, components, evals[order])


# ======================================================
# Cluster metrics
# ======================================================

@dataclass
class ClusterMetrics:
    silhouette: float
    intra_similarity: Dict[str, float]
    cross_accent_similarity: float
    n_rows: int
    n_classes: int


def _cosine_distances(h: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise MetricError("cosine distance is undefined for zero vectors")
    z = h / norms
    d = 1.0 - z @ z.T
    d[np.abs(d) < 1e-12] = 0.0
    return np.clip(d, 0.0, 2.0)


def silhouette_score(h: np.ndarray, labels: Sequence[str]) -> float:
    """Mean silhouette with cosine distance; a point with max(a, b) == 0 scores 0"""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise MetricError(f"silhouette needs at least 2 classes, got {len(classes)}")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    if any(idx.size < 2 for idx in members.values()):
        raise MetricError("every class needs at least 2 rows")
    d = _cosine_distances(h)
    mean_to = np.stack([d[:, members[c]].sum(axis=1) / members[c].size for c in classes], axis=1)
    scores = np.zeros(len(labels))
    for ci, c in enumerate(classes):
        idx = members[c]
        a = d[np.ix_(idx, idx)].sum(axis=1) / (idx.size - 1)
        b = np.delete(mean_to[idx], ci, axis=1).min(axis=1)
        denom = np.maximum(a, b)
        scores[idx] = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(scores.mean())


def cluster_metrics(dump: EmbeddingDump) -> ClusterMetrics:
    """Letter silhouette, per-letter intra-class similarity and cross-accent same-letter similarity.

    Letters seen only once are left out of every metric.
    """
    letters = np.asarray(dump.letters)
    names, counts = np.unique(letters, return_counts=True)
    keep = np.isin(letters, names[counts >= 2])
    if not keep.all():
        logger.info(f"Skipping {int((~keep).sum())} rows of letters seen only once: "
                    f"{', '.join(names[counts < 2].tolist())}")
    h = dump.h[keep]
    letters = letters[keep]
    accents = np.asarray(dump.accent_ids)[keep]

    sil = silhouette_score(h, letters.tolist())
    sim = 1.0 - _cosine_distances(h)

    intra = {}
    for letter in sorted(set(letters.tolist())):
        idx = np.flatnonzero(letters == letter)
        block = sim[np.ix_(idx, idx)]
        intra[letter] = float((block.sum() - np.trace(block)) / (idx.size * (idx.size - 1)))

    same_letter = letters[:, None] == letters[None, :]
    diff_accent = accents[:, None] != accents[None, :]
    cross = np.triu(same_letter & diff_accent, k=1)
    cross_sim = float(sim[cross].mean()) if cross.any() else float("nan")

    logger.info(f"Silhouette {sil:.4f} over {len(intra)} letters; cross-accent similarity {cross_sim:.4f}")
    return ClusterMetrics(sil, intra, cross_sim, int(h.shape[0]), len(intra))


def write_pca_csv(coords: np.ndarray, dump: EmbeddingDump, path: str) -> None:
    pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "letter": dump.letters,
                  "accent": dump.accent_ids}).to_csv(path, index=False)


def pca_figure(coords: np.ndarray, dump: EmbeddingDump, title: Optional[str] = None):
    """Static plotly scatter of the projection colored by letter"""
    frame = pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "letter": dump.letters, "accent": dump.accent_ids})
    fig = px.scatter(frame, x="x", y="y", color="letter", symbol="accent", hover_data=["accent"],
                     title=title or f"Character representations ({dump.checkpoint_id})")
    fig.update_layout(legend_title_text="Letter")
    return fig
