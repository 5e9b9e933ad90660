"""
Deterministic synthetic "accented speech" corpus.

Characters are unit prototypes in a D-dimensional feature space; an accent is an
affine deformation A·p + b applied consistently to every character it renders.
Utterances are rendered frame by frame with per-utterance seeds, so the whole
corpus is a pure function of its config and master seed.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError, ContractError, GenerationError, VocabularyError

logger = logging.getLogger(__name__)

# ======================================================
# Vocabulary
# ======================================================

LETTERS = "abcdefghijklmnopqrstuvwxyz"
SPACE, APOSTROPHE, HYPHEN, SOS, EOS, PAD, UNK = range(26, 33)
VOCAB_SIZE = 33
PROTOTYPE_SYMBOLS = LETTERS + " '-"


class Vocab:
    """The fixed 33-label output vocabulary"""

    def __init__(self):
        self.labels: List[str] = list(LETTERS) + [" ", "'", "-", "<sos>", "<eos>", "<pad>", "<unk>"]
        self.index: Dict[str, int] = {label: i for i, label in enumerate(self.labels)}

    @property
    def size(self) -> int:
        return len(self.labels)

    @staticmethod
    def is_letter(idx: int) -> bool:
        return 0 <= idx < 26

    def encode(self, text: str) -> List[int]:
        ids = []
        for ch in text:
            if ch not in PROTOTYPE_SYMBOLS:
                raise VocabularyError(f"character {ch!r} is not in the vocabulary")
            ids.append(self.index[ch])
        return ids

    def wrap(self, text: str) -> np.ndarray:
        """SOS + encoded text + EOS"""
        return np.array([SOS] + self.encode(text) + [EOS], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        """Token ids to text; SOS/EOS/PAD are stripped, UNK becomes '*'"""
        out = []
        for i in ids:
            i = int(i)
            if i in (SOS, EOS, PAD):
                continue
            if not 0 <= i < VOCAB_SIZE:
                raise VocabularyError(f"token id {i} is outside the vocabulary")
            out.append("*" if i == UNK else self.labels[i])
        return "".join(out)


VOCAB = Vocab()


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed derived from a master seed and any number of keys"""
    material = ":".join([str(master)] + [str(k) for k in keys]).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


# ======================================================
# Prototypes and accents
# ======================================================

def build_prototypes(seed: int, dim: int, max_cosine: float = 0.9, max_redraws: int = 100) -> Dict[str, np.ndarray]:
    """29 unit-norm character prototypes with pairwise cosine below max_cosine"""
    if dim < 8:
        raise ContractError(f"prototype dimension must be >= 8, got {dim}")
    rng = np.random.default_rng(seed)
    n = len(PROTOTYPE_SYMBOLS)
    for attempt in range(max_redraws):
        protos = rng.standard_normal((n, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        cos = protos @ protos.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < max_cosine:
            if attempt:
                logger.info(f"Prototypes accepted after {attempt + 1} draws")
            return {ch: protos[i] for i, ch in enumerate(PROTOTYPE_SYMBOLS)}
    raise GenerationError(f"no prototype set with max cosine < {max_cosine} after {max_redraws} draws")


@dataclass(eq=False)
class AccentProfile:
    accent_id: str
    transform: np.ndarray
    bias: np.ndarray
    duration_range: Tuple[int, int]
    seed: int
    gamma: float

    def apply(self, proto: np.ndarray) -> np.ndarray:
        return self.transform @ proto + self.bias


def make_accent(accent_id: str, dim: int, gamma: float, seed: int,
                duration_range: Tuple[int, int] = (3, 5), max_condition: float = 1e6) -> AccentProfile:
    """A = I + gamma*R with R scaled to unit spectral norm; regenerated until well conditioned"""
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    for _ in range(100):
        r = rng.standard_normal((dim, dim))
        r /= np.linalg.norm(r, 2)
        transform = eye + gamma * r
        if np.linalg.cond(transform) < max_condition:
            break
    else:
        raise GenerationError(f"accent {accent_id}: no invertible transform found")
    bias = gamma * rng.standard_normal(dim) / np.sqrt(dim)
    return AccentProfile(accent_id, transform, bias, (int(duration_range[0]), int(duration_range[1])), seed, gamma)


def identity_accent(dim: int, duration_range: Tuple[int, int] = (3, 5)) -> AccentProfile:
    return AccentProfile("identity", np.eye(dim), np.zeros(dim), duration_range, 0, 0.0)


# ======================================================
# Utterances
# ======================================================

@dataclass(eq=False)
class Utterance:
    utt_id: str
    text: str
    frames: np.ndarray
    accent_id: str
    target: np.ndarray
    split: str = ""
    render_seed: int = 0
    alignment: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def render_utterance(text: str, accent: AccentProfile, prototypes: Dict[str, np.ndarray],
                     noise_sigma: float = 0.05, seed: int = 0, utt_id: str = "", split: str = "") -> Utterance:
    """Render text through an accent: L frames of A·p_c + b + noise per character, 2 noise frames between words"""
    if not text:
        raise ContractError("cannot render empty text")
    target = VOCAB.wrap(text)
    words = text.split(" ")
    if any(not w for w in words):
        raise ContractError(f"text {text!r} has empty words (leading, trailing or doubled spaces)")

    rng = np.random.default_rng(seed)
    dim = accent.transform.shape[0]
    lo, hi = accent.duration_range
    chunks: List[np.ndarray] = []
    alignment: List[int] = []
    for wi, word in enumerate(words):
        if wi:
            chunks.append(noise_sigma * rng.standard_normal((2, dim)))
            alignment.extend([-1, -1])
        for ch in word:
            length = int(rng.integers(lo, hi + 1))
            clean = accent.apply(prototypes[ch])
            chunks.append(clean + noise_sigma * rng.standard_normal((length, dim)))
            alignment.extend([VOCAB.index[ch]] * length)

    return Utterance(
        utt_id=utt_id,
        text=text,
        frames=np.vstack(chunks),
        accent_id=accent.accent_id,
        target=target,
        split=split,
        render_seed=seed,
        alignment=np.array(alignment, dtype=np.int64),
    )


# ======================================================
# Corpus generation
# ======================================================

@dataclass
class CorpusConfig:
    dim: int = 20
    lexicon_size: int = 50
    word_len_min: int = 2
    word_len_max: int = 7
    words_min: int = 1
    words_max: int = 4
    train_sentences: int = 400
    val_sentences: int = 100
    test_sentences: int = 120
    num_train_accents: int = 5
    num_val_accents: int = 3
    num_test_accents: int = 5
    train_gamma: float = 0.3
    val_gamma: float = 0.375
    test_gamma: float = 0.45
    voice_gamma: float = 0.3
    duration_min: int = 3
    duration_max: int = 5
    voice_duration_min: int = 2
    voice_duration_max: int = 6
    noise_sigma: float = 0.05
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.dim < 8:
            raise ConfigError(f"corpus.dim must be >= 8, got {self.dim}", "dim")
        if not 2 <= self.word_len_min <= self.word_len_max:
            raise ConfigError("corpus word lengths must satisfy 2 <= word_len_min <= word_len_max", "word_len_min")
        if not 1 <= self.words_min <= self.words_max:
            raise ConfigError("corpus sentence lengths must satisfy 1 <= words_min <= words_max", "words_min")
        if self.lexicon_size < 1:
            raise ConfigError(f"corpus.lexicon_size out of range: {self.lexicon_size}", "lexicon_size")
        for key in ("train_sentences", "val_sentences", "test_sentences",
                    "num_train_accents", "num_val_accents", "num_test_accents"):
            if getattr(self, key) < 1:
                raise ConfigError(f"corpus.{key} must be >= 1", key)
        if not 1 <= self.duration_min <= self.duration_max:
            raise ConfigError("corpus durations must satisfy 1 <= duration_min <= duration_max", "duration_min")
        if not 1 <= self.voice_duration_min <= self.voice_duration_max:
            raise ConfigError("voice durations must satisfy 1 <= min <= max", "voice_duration_min")
        if self.noise_sigma < 0:
            raise ConfigError("corpus.noise_sigma must be >= 0", "noise_sigma")
        for key in ("train_gamma", "val_gamma", "test_gamma", "voice_gamma"):
            if getattr(self, key) < 0:
                raise ConfigError(f"corpus.{key} must be >= 0", key)


SPLITS = ("train", "validation", "test")
_SPLIT_PREFIX = {"train": "tr", "validation": "va", "test": "te"}


@dataclass(eq=False)
class CorpusSplit:
    config: CorpusConfig
    prototypes: Dict[str, np.ndarray]
    accents: Dict[str, AccentProfile]
    voice: AccentProfile
    lexicon: List[str]
    train: Dict[str, List[Utterance]] = field(default_factory=dict)
    validation: Dict[str, List[Utterance]] = field(default_factory=dict)
    test: Dict[str, List[Utterance]] = field(default_factory=dict)

    def by_split(self, split: str) -> Dict[str, List[Utterance]]:
        if split not in SPLITS:
            raise ContractError(f"unknown split '{split}'")
        return getattr(self, split)

    def accent_ids(self, split: str) -> List[str]:
        return list(self.by_split(split).keys())

    def utterances(self, split: str) -> List[Utterance]:
        return [u for utts in self.by_split(split).values() for u in utts]

    def all_utterances(self) -> List[Utterance]:
        return [u for s in SPLITS for u in self.utterances(s)]


def _accent_plan(config: CorpusConfig) -> List[Tuple[str, str, float]]:
    plan = []
    for split, count, gamma in (("train", config.num_train_accents, config.train_gamma),
                                ("validation", config.num_val_accents, config.val_gamma),
                                ("test", config.num_test_accents, config.test_gamma)):
        for i in range(count):
            plan.append((split, f"{_SPLIT_PREFIX[split]}{i}", gamma))
    return plan


def build_profiles(config: CorpusConfig) -> Tuple[Dict[str, np.ndarray], Dict[str, AccentProfile], AccentProfile]:
    """Prototypes, accent profiles and the reserved alternate voice for a config"""
    prototypes = build_prototypes(derive_seed(config.seed, "prototypes"), config.dim)
    accents = {}
    for _, accent_id, gamma in _accent_plan(config):
        accents[accent_id] = make_accent(accent_id, config.dim, gamma, derive_seed(config.seed, "accent", accent_id),
                                         (config.duration_min, config.duration_max))
    voice = make_accent("voice", config.dim, config.voice_gamma, derive_seed(config.seed, "voice"),
                        (config.voice_duration_min, config.voice_duration_max))
    return prototypes, accents, voice


def build_lexicon(config: CorpusConfig) -> List[str]:
    rng = np.random.default_rng(derive_seed(config.seed, "lexicon"))
    letters = np.array(list(LETTERS))
    words: List[str] = []
    seen = set()
    attempts = 0
    while len(words) < config.lexicon_size:
        attempts += 1
        if attempts > config.lexicon_size * 1000:
            raise GenerationError(f"could not draw {config.lexicon_size} distinct words")
        length = int(rng.integers(config.word_len_min, config.word_len_max + 1))
        word = "".join(rng.choice(letters, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _sentences(config: CorpusConfig, lexicon: List[str], accent_id: str, count: int) -> List[str]:
    rng = np.random.default_rng(derive_seed(config.seed, "text", accent_id))
    out = []
    for _ in range(count):
        n = int(rng.integers(config.words_min, config.words_max + 1))
        out.append(" ".join(lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n)))
    return out


def generate_corpus(config: CorpusConfig) -> CorpusSplit:
    """Generate the full 5/3/5 accent corpus; a pure function of the config"""
    config.validate()
    prototypes, accents, voice = build_profiles(config)
    lexicon = build_lexicon(config)
    corpus = CorpusSplit(config, prototypes, accents, voice, lexicon)

    per_split = {"train": config.train_sentences, "validation": config.val_sentences, "test": config.test_sentences}
    jobs = []
    for split, accent_id, _ in _accent_plan(config):
        for k, text in enumerate(_sentences(config, lexicon, accent_id, per_split[split])):
            utt_id = f"{accent_id}-{k:04d}"
            jobs.append((split, accent_id, utt_id, text))

    def render(job):
        split, accent_id, utt_id, text = job
        return render_utterance(text, accents[accent_id], prototypes, config.noise_sigma,
                                derive_seed(config.seed, "render", utt_id), utt_id, split)

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        rendered = list(pool.map(render, jobs))

    for utt in rendered:
        corpus.by_split(utt.split).setdefault(utt.accent_id, []).append(utt)

    logger.info(f"Generated corpus: {len(corpus.utterances('train'))} train, "
                f"{len(corpus.utterances('validation'))} validation, {len(corpus.utterances('test'))} test utterances")
    return corpus


# ======================================================
# Serialization
# ======================================================

FRAMES_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
CONFIG_NAME = "corpus_config.json"


def write_frames(path: str, frames: np.ndarray) -> None:
    """Flat little-endian fp64 with an int64 (T, D, version) header"""
    frames = np.ascontiguousarray(frames, dtype="<f8")
    header = np.array([frames.shape[0], frames.shape[1], FRAMES_VERSION], dtype="<i8")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(frames.tobytes())


def read_frames(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    t, d, version = np.frombuffer(raw[:24], dtype="<i8")
    if version != FRAMES_VERSION:
        raise GenerationError(f"{path}: unsupported frames version {version}")
    data = np.frombuffer(raw[24:], dtype="<f8")
    if data.size != t * d:
        raise GenerationError(f"{path}: expected {t}x{d} values, found {data.size}")
    return data.reshape(int(t), int(d)).astype(np.float64)


def build_manifest(corpus: CorpusSplit) -> pd.DataFrame:
    rows = []
    for utt in corpus.all_utterances():
        rows.append({
            "id": utt.utt_id,
            "accent_id": utt.accent_id,
            "split": utt.split,
            "text": utt.text,
            "frames_path": f"frames/{utt.utt_id}.f64",
            "render_seed": str(utt.render_seed),
            "frames_sha256": hashlib.sha256(np.ascontiguousarray(utt.frames, dtype="<f8").tobytes()).hexdigest(),
        })
    return pd.DataFrame(rows)


def save_corpus(corpus: CorpusSplit, out_dir: str) -> str:
    """Write frames, manifest and config echo; returns the manifest path"""
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    manifest = build_manifest(corpus)
    for utt, rel in zip(corpus.all_utterances(), manifest["frames_path"]):
        write_frames(os.path.join(out_dir, rel), utt.frames)
    path = os.path.join(out_dir, MANIFEST_NAME)
    manifest.to_json(path, orient="records", lines=True)
    with open(os.path.join(out_dir, CONFIG_NAME), "w") as f:
        json.dump(asdict(corpus.config), f, indent=2, sort_keys=True)
    logger.info(f"Corpus written to {out_dir} ({len(manifest)} utterances)")
    return path


def manifest_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_corpus(out_dir: str) -> CorpusSplit:
    """Reload a saved corpus; profiles are rebuilt from the echoed config"""
    config_path = os.path.join(out_dir, CONFIG_NAME)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if not (os.path.exists(config_path) and os.path.exists(manifest_path)):
        raise GenerationError(f"no corpus found in {out_dir}; run gen-corpus first")
    with open(config_path) as f:
        config = CorpusConfig(**json.load(f))
    prototypes, accents, voice = build_profiles(config)
    corpus = CorpusSplit(config, prototypes, accents, voice, build_lexicon(config))

    with open(manifest_path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    for rec in records:
        utt = Utterance(
            utt_id=rec["id"],
            text=rec["text"],
            frames=read_frames(os.path.join(out_dir, rec["frames_path"])),
            accent_id=rec["accent_id"],
            target=VOCAB.wrap(rec["text"]),
            split=rec["split"],
            render_seed=int(rec["render_seed"]),
        )
        corpus.by_split(utt.split).setdefault(utt.accent_id, []).append(utt)
    return corpus


# ======================================================
# Sanity properties
# ======================================================

def corpus_frame_rms(utterances: Sequence[Utterance]) -> float:
    total = 0.0
    count = 0
    for utt in utterances:
        total += float(np.sum(utt.frames ** 2))
        count += utt.frames.size
    if count == 0:
        raise ContractError("frame RMS of an empty utterance list")
    return float(np.sqrt(total / count))


def accent_classifier_accuracy(utterances: Sequence[Utterance], seed: int = 0, epochs: int = 500,
                          lr: float = 0.5, holdout: float = 0.2) -> float:
    """Held-out accuracy of a softmax linear classifier predicting accent from mean frame vectors"""
    accent_ids = sorted({u.accent_id for u in utterances})
    if len(accent_ids) < 2:
        raise ContractError("accent classifier needs at least two accents")
    x = np.stack([u.frames.mean(axis=0) for u in utterances])
    y = np.array([accent_ids.index(u.accent_id) for u in utterances])
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)
    x = np.hstack([x, np.ones((len(x), 1))])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_test = max(1, int(round(holdout * len(x))))
    test_idx, train_idx = order[:n_test], order[n_test:]

    w = np.zeros((x.shape[1], len(accent_ids)))
    onehot = np.eye(len(accent_ids))[y[train_idx]]
    for _ in range(epochs):
        logits = x[train_idx] @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * x[train_idx].T @ (p - onehot) / len(train_idx)
    pred = np.argmax(x[test_idx] @ w, axis=1)
    return float(np.mean(pred == y[test_idx]))


def nearest_prototype_accuracy(texts: Sequence[str], prototypes: Dict[str, np.ndarray],
                               noise_sigma: float = 0.05, seed: int = 0) -> float:
    """Per-frame nearest-prototype labelling accuracy on identity-accent renders"""
    dim = next(iter(prototypes.values())).shape[0]
    accent = identity_accent(dim)
    symbols = [c for c in PROTOTYPE_SYMBOLS if c != " "]
    table = np.stack([prototypes[c] for c in symbols])
    labels = np.array([VOCAB.index[c] for c in symbols])
    correct = 0
    total = 0
    for i, text in enumerate(texts):
        utt = render_utterance(text, accent, prototypes, noise_sigma, derive_seed(seed, "nearest-prototype", i))
        keep = utt.alignment >= 0
        frames = utt.frames[keep]
        dist = ((frames[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
        pred = labels[np.argmin(dist, axis=1)]
        correct += int(np.sum(pred == utt.alignment[keep]))
        total += int(keep.sum())
    return correct / total if total else 0.0
