"""
Beam-search decoding with a square-root word-count bonus, word/character error
rates, and per-accent evaluation reports.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from corpus import EOS, SOS, VOCAB, VOCAB_SIZE, Utterance
from errors import ConfigError, MetricError
from model import ModelParams, decode_step, encode, greedy_decode

logger = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    beam_size: int = 5
    lam: float = 0.1
    max_len: int = 0
    max_len_factor: float = 2.0
    method: str = "beam"
    workers: int = 1

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError("decode.beam_size must be >= 1", "beam_size")
        if self.lam < 0:
            raise ConfigError("decode.lam must be >= 0", "lam")
        if self.max_len < 0 or self.max_len_factor <= 0:
            raise ConfigError("decode.max_len must be >= 0 and max_len_factor > 0", "max_len")
        if self.method not in ("beam", "greedy"):
            raise ConfigError(f"decode.method must be beam or greedy, got {self.method}", "method")

    def max_len_for(self, target_len: int) -> int:
        """Explicit max_len, else factor x reference length (SOS excluded), rounded up"""
        if self.max_len:
            return self.max_len
        return max(1, int(math.ceil(self.max_len_factor * max(1, target_len - 1))))


# ======================================================
# Beam search
# ======================================================

def word_count(text: str) -> int:
    return len(text.split())


@dataclass(eq=False)
class BeamHypothesis:
    tokens: Tuple[int, ...]
    logprob: float
    state: Any
    finished: bool = False

    @property
    def text(self) -> str:
        return VOCAB.decode(self.tokens)

    def score(self, lam: float) -> float:
        return self.logprob + lam * math.sqrt(word_count(self.text))


def _rank_key(hyp: BeamHypothesis, lam: float):
    return (-hyp.score(lam), len(hyp.tokens), hyp.tokens)


_WORD_TOKENS = frozenset(t for t in range(VOCAB_SIZE) if VOCAB.decode([t]).strip())


def _best_extensions(hyp: BeamHypothesis, logprobs: np.ndarray, tokens: Sequence[int], beam_size: int) -> List[int]:
    """Tokens of one parent that can still make the beam.

    Extensions either keep the word count or start a new word; within each
    group the ranking follows the token log-prob alone.
    """
    text = hyp.text
    if not text or text.endswith(" "):
        groups = ([t for t in tokens if t in _WORD_TOKENS], [t for t in tokens if t not in _WORD_TOKENS])
    else:
        groups = (list(tokens),)
    keep: List[int] = []
    for group in groups:
        keep.extend(sorted(group, key=lambda t: (-float(logprobs[t]), t))[:beam_size])
    return keep


StepFn = Callable[[int, Any], Tuple[np.ndarray, Any]]


def beam_search_core(init_state: Any, step_fn: StepFn, beam_size: int, lam: float, max_len: int,
                     candidate_tokens: Optional[Sequence[int]] = None) -> BeamHypothesis:
    """Generic beam search over a step function returning (log-probs, new state).

    Hypotheses are ranked by log-prob + lam*sqrt(word count) of their prefix; a
    hypothesis finishes on EOS or at max_len tokens. Ties go to the shorter,
    then lexicographically smaller, token sequence.
    """
    if beam_size < 1 or lam < 0 or max_len < 1:
        raise ConfigError(f"invalid beam search settings beam={beam_size} lam={lam} max_len={max_len}")
    tokens_to_try = list(candidate_tokens) if candidate_tokens is not None else list(range(VOCAB_SIZE))

    beams = [BeamHypothesis((SOS,), 0.0, init_state)]
    finished: List[BeamHypothesis] = []
    while beams:
        expanded: List[BeamHypothesis] = []
        for hyp in beams:
            logprobs, new_state = step_fn(hyp.tokens[-1], hyp.state)
            for tok in _best_extensions(hyp, logprobs, tokens_to_try, beam_size):
                tokens = hyp.tokens + (tok,)
                done = tok == EOS or len(tokens) - 1 >= max_len
                expanded.append(BeamHypothesis(tokens, hyp.logprob + float(logprobs[tok]), new_state, done))
        expanded.sort(key=lambda h: _rank_key(h, lam))
        kept = expanded[:beam_size]
        finished.extend(h for h in kept if h.finished)
        beams = [h for h in kept if not h.finished]
    return min(finished, key=lambda h: _rank_key(h, lam))


def beam_search(frames: np.ndarray, params: ModelParams, beam_size: int = 5, lam: float = 0.1,
                max_len: int = 50) -> List[int]:
    """Best token sequence after SOS (EOS included when emitted)"""
    weights = params.bind(False)
    enc_states = encode(frames, weights)

    def step(prev: int, state):
        _, logprobs, new_state = decode_step(prev, state, enc_states, weights)
        return logprobs.data, new_state

    best = beam_search_core(None, step, beam_size, lam, max_len)
    return list(best.tokens[1:])


# ======================================================
# Error rates
# ======================================================

def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Levenshtein distance with unit costs"""
    n, m = len(reference), len(hypothesis)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)
    return int(d[n, m])


def wer(reference: str, hypothesis: str) -> float:
    """Word-level edit distance / reference words x 100"""
    ref = reference.split()
    if not ref:
        raise MetricError("WER is undefined for an empty reference")
    return 100.0 * edit_distance(ref, hypothesis.split()) / len(ref)


def cer(reference: str, hypothesis: str) -> float:
    """Character-level edit distance over whitespace-normalized strings x 100"""
    ref = " ".join(reference.split())
    if not ref:
        raise MetricError("CER is undefined for an empty reference")
    return 100.0 * edit_distance(ref, " ".join(hypothesis.split())) / len(ref)


# ======================================================
# Reports
# ======================================================

@dataclass
class AccentScore:
    accent_id: str
    n_utts: int = 0
    word_errors: int = 0
    ref_words: int = 0
    char_errors: int = 0
    ref_chars: int = 0

    @property
    def wer(self) -> float:
        return 100.0 * self.word_errors / self.ref_words if self.ref_words else 0.0

    @property
    def cer(self) -> float:
        return 100.0 * self.char_errors / self.ref_chars if self.ref_chars else 0.0


@dataclass
class EvalReport:
    accents: Dict[str, AccentScore]
    meta: Dict[str, str] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def macro_wer(self) -> float:
        """Unweighted mean of per-accent WERs"""
        if not self.accents:
            raise MetricError("empty report has no average")
        return float(np.mean([a.wer for a in self.accents.values()]))

    @property
    def macro_cer(self) -> float:
        if not self.accents:
            raise MetricError("empty report has no average")
        return float(np.mean([a.cer for a in self.accents.values()]))

    def to_frame(self) -> pd.DataFrame:
        rows = [{"accent": a.accent_id, "n_utts": a.n_utts, "wer": a.wer} for a in self.accents.values()]
        rows.append({"accent": "avg", "n_utts": sum(a.n_utts for a in self.accents.values()), "wer": self.macro_wer})
        return pd.DataFrame(rows, columns=["accent", "n_utts", "wer"])

    def write_csv(self, path: str) -> None:
        header = ";".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
        with open(path, "w") as f:
            f.write(f"# {header}\n")
            self.to_frame().to_csv(f, index=False, float_format="%.4f")

    def render_table(self) -> str:
        title = ", ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
        lines = [f"WER (%) {title}".rstrip(), f"{'Accent':<10}{'Utts':>6}{'WER':>9}{'CER':>9}"]
        for a in self.accents.values():
            lines.append(f"{a.accent_id:<10}{a.n_utts:>6}{a.wer:>9.2f}{a.cer:>9.2f}")
        lines.append(f"{'Avg.':<10}{sum(a.n_utts for a in self.accents.values()):>6}"
                     f"{self.macro_wer:>9.2f}{self.macro_cer:>9.2f}")
        return "\n".join(lines)


DecodeFn = Callable[[Utterance], str]


def model_decoder(params: ModelParams, cfg: DecodeConfig) -> DecodeFn:
    """Text decoder for one utterance using the configured search"""

    def decode(utt: Utterance) -> str:
        max_len = cfg.max_len_for(len(utt.target))
        if cfg.method == "greedy":
            tokens = greedy_decode(utt.frames, params, max_len)
        else:
            tokens = beam_search(utt.frames, params, cfg.beam_size, cfg.lam, max_len)
        return VOCAB.decode(tokens)

    return decode


def evaluate_split(utterances: Sequence[Utterance], params: Optional[ModelParams], decode_cfg: DecodeConfig,
                   meta: Optional[Dict[str, str]] = None, decode_fn: Optional[DecodeFn] = None) -> EvalReport:
    """Decode every utterance and aggregate corpus-level WER per accent"""
    if not utterances:
        raise MetricError("cannot evaluate an empty utterance list")
    decode_cfg.validate()
    if decode_fn is None:
        if params is None:
            raise ConfigError("evaluate_split needs params or a decode_fn")
        decode_fn = model_decoder(params, decode_cfg)

    with ThreadPoolExecutor(max_workers=max(1, decode_cfg.workers)) as pool:
        hypotheses = list(pool.map(decode_fn, utterances))

    accents: Dict[str, AccentScore] = {}
    rows = []
    for utt, hyp in zip(utterances, hypotheses):
        ref_words = utt.text.split()
        ref_chars = " ".join(ref_words)
        word_errors = edit_distance(ref_words, hyp.split())
        char_errors = edit_distance(ref_chars, " ".join(hyp.split()))
        score = accents.setdefault(utt.accent_id, AccentScore(utt.accent_id))
        score.n_utts += 1
        score.word_errors += word_errors
        score.ref_words += len(ref_words)
        score.char_errors += char_errors
        score.ref_chars += len(ref_chars)
        rows.append({"utt_id": utt.utt_id, "accent": utt.accent_id, "reference": utt.text, "hypothesis": hyp,
                     "word_errors": word_errors, "ref_words": len(ref_words),
                     "wer": 100.0 * word_errors / len(ref_words)})

    report = EvalReport(accents, dict(meta or {}), rows)
    logger.info(f"Evaluated {len(utterances)} utterances over {len(accents)} accents: "
                f"macro WER {report.macro_wer:.2f}%")
    return report


# ======================================================
# Matrix reports
# ======================================================

MATRIX_COLUMNS = ["mode", "augmentation", "shot", "seed", "accent", "n_utts", "wer"]


def matrix_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """One row per (cell, accent) plus an 'avg' row per cell"""
    rows = []
    for report in reports:
        key = {k: report.meta.get(k, "") for k in ("mode", "augmentation", "shot", "seed")}
        for rec in report.to_frame().to_dict("records"):
            rows.append({**key, **rec})
    return pd.DataFrame(rows, columns=MATRIX_COLUMNS)


def render_matrix_table(frame: pd.DataFrame) -> str:
    """Accents as rows, mode+augmentation cells as columns, one block per shot; seeds averaged"""
    if frame.empty:
        return "(no completed cells)"
    frame = frame.copy()
    frame["cell"] = frame["mode"] + "+" + frame["augmentation"]
    blocks = []
    for shot in sorted(frame["shot"].unique()):
        sub = frame[frame["shot"] == shot]
        table = sub.pivot_table(index="accent", columns="cell", values="wer", aggfunc="mean", sort=True)
        order = [a for a in table.index if a != "avg"] + (["avg"] if "avg" in table.index else [])
        table = table.loc[order].rename(index={"avg": "Avg."})
        blocks.append(f"{shot}-shot WER (%)\n{table.to_string(float_format=lambda v: f'{v:.2f}')}")
    return "\n\n".join(blocks)
