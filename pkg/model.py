"""
Tiny attention encoder-decoder with an ASR head g and a contrastive head f.

The encoder is a single tanh recurrence over frames. Each decoder step attends
over encoder states with dot-product scores against the previous decoder state,
consumes the previous token embedding plus the attention context, and exposes
its hidden state h to both linear heads.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import numerics as nx
from corpus import EOS, PAD, SOS, VOCAB_SIZE
from errors import CheckpointError, ConfigError, ContractError, VocabularyError
from numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    dim: int = 20
    hidden: int = 64
    embed: int = 32
    proj: int = 16
    vocab: int = VOCAB_SIZE

    def validate(self) -> None:
        for key in ("dim", "hidden", "embed", "proj"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key} must be >= 1", key)
        if self.vocab != VOCAB_SIZE:
            raise ConfigError(f"model.vocab must be {VOCAB_SIZE}", "vocab")

    def shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        d, h, e, p, v = self.dim, self.hidden, self.embed, self.proj, self.vocab
        return OrderedDict([
            ("enc_Wx", (h, d)),
            ("enc_Wh", (h, h)),
            ("enc_b", (h,)),
            ("emb", (v, e)),
            ("dec_Wx", (h, e + h)),
            ("dec_Wh", (h, h)),
            ("dec_b", (h,)),
            ("g_W", (v, h)),
            ("g_b", (v,)),
            ("f_W", (p, h)),
            ("f_b", (p,)),
        ])

    def fan_in(self, name: str) -> int:
        d, h, e = self.dim, self.hidden, self.embed
        return {
            "enc_Wx": d, "enc_Wh": h, "enc_b": h,
            "emb": e,
            "dec_Wx": e + h, "dec_Wh": h, "dec_b": h,
            "g_W": h, "g_b": h,
            "f_W": h, "f_b": h,
        }[name]


F_HEAD = ("f_W", "f_b")


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count"""
    d, h, e, p, v = config.dim, config.hidden, config.embed, config.proj, config.vocab
    return (h * d + h * h + h) + v * e + (h * (e + h) + h * h + h) + (v * h + v) + (p * h + p)


class ModelParams:
    """Named weight matrices plus the config they were built for"""

    def __init__(self, config: ModelConfig, weights: Dict[str, np.ndarray], meta: Optional[Dict] = None):
        self.config = config
        self.weights: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.asarray(weights[name], dtype=np.float64)) for name in config.shapes())
        self.meta: Dict = dict(meta or {})
        for name, shape in config.shapes().items():
            if self.weights[name].shape != shape:
                raise CheckpointError(f"matrix '{name}' has shape {self.weights[name].shape}, expected {shape}", name)

    def count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.meta)

    def bind(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        """Wrap every weight as a leaf tensor"""
        return {name: Tensor(w, requires_grad=requires_grad) for name, w in self.weights.items()}

    @property
    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for name, w in self.weights.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


Weights = Union[ModelParams, Dict[str, Tensor]]


def _bound(params: Weights) -> Dict[str, Tensor]:
    return params.bind(False) if isinstance(params, ModelParams) else params


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in)"""
    config.validate()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in config.shapes().items():
        s = 1.0 / np.sqrt(config.fan_in(name))
        weights[name] = rng.uniform(-s, s, size=shape)
    params = ModelParams(config, weights)
    logger.debug(f"Initialized {params.count()} parameters (seed={seed})")
    return params


# ======================================================
# Forward passes
# ======================================================

class ForwardResult(NamedTuple):
    h: Tensor
    asr_logprobs: Tensor
    proj: Tensor


def encode(frames: Union[np.ndarray, Tensor], params: Weights) -> Tensor:
    """One-layer tanh recurrence from a zero state; returns T x H"""
    w = _bound(params)
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"encode expects a non-empty T x D frame matrix, got {x.shape}")
    inputs = nx.matmul(x, nx.transpose(w["enc_Wx"]))
    state = Tensor(np.zeros(w["enc_Wh"].shape[0]))
    states = []
    for t in range(x.shape[0]):
        state = nx.tanh(nx.row(inputs, t) + nx.matmul(w["enc_Wh"], state) + w["enc_b"])
        states.append(state)
    return nx.stack(states)


def _decoder_step(w: Dict[str, Tensor], prev_token: int, state: Tensor,
                  enc_states: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    scores = nx.matmul(enc_states, state)
    attn = nx.exp(nx.log_softmax(scores))
    context = nx.matmul(nx.transpose(enc_states), attn)
    x = nx.concat([nx.row(w["emb"], prev_token), context])
    new_state = nx.tanh(nx.matmul(w["dec_Wx"], x) + nx.matmul(w["dec_Wh"], state) + w["dec_b"])
    logprobs = nx.log_softmax(nx.matmul(w["g_W"], new_state) + w["g_b"])
    proj = nx.matmul(w["f_W"], new_state) + w["f_b"]
    return new_state, logprobs, proj


def initial_state(params: Weights) -> Tensor:
    return Tensor(np.zeros(_bound(params)["dec_Wh"].shape[0]))


def _check_token(token: int) -> int:
    token = int(token)
    if not 0 <= token < VOCAB_SIZE:
        raise VocabularyError(f"token id {token} is outside the vocabulary")
    return token


def forward_teacher_forced(frames: Union[np.ndarray, Tensor], target, params: Weights) -> ForwardResult:
    """Decode with the ground-truth history; one row per target position after SOS"""
    target = [int(t) for t in target]
    if len(target) < 2 or target[0] != SOS or target[-1] != EOS:
        raise ContractError("target must begin with SOS and end with EOS")
    for t in target:
        _check_token(t)
    w = _bound(params)
    enc_states = encode(frames, w)
    state = initial_state(w)
    hs, lps, projs = [], [], []
    for i in range(1, len(target)):
        state, lp, pj = _decoder_step(w, target[i - 1], state, enc_states)
        hs.append(state)
        lps.append(lp)
        projs.append(pj)
    return ForwardResult(nx.stack(hs), nx.stack(lps), nx.stack(projs))


class BatchForward(NamedTuple):
    """Time-major results for a padded batch; step i of utterance b predicts targets[b, i + 1]"""
    h: Tensor
    asr_logprobs: Tensor
    proj: Tensor
    targets: np.ndarray

    def positions(self) -> Tuple[np.ndarray, np.ndarray]:
        """(step, utterance) index arrays of every non-PAD prediction, utterance-major"""
        utts, steps = np.nonzero(self.targets[:, 1:] != PAD)
        return steps, utts


def _pad_batch(frames: Sequence[np.ndarray], targets: Sequence, dim: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not frames or len(frames) != len(targets):
        raise ContractError(f"batch needs matching non-empty frame and target lists, "
                            f"got {len(frames)} and {len(targets)}")
    rows = []
    for target in targets:
        ids = [int(t) for t in target]
        if len(ids) < 2 or ids[0] != SOS or ids[-1] != EOS:
            raise ContractError("target must begin with SOS and end with EOS")
        for t in ids:
            _check_token(t)
        rows.append(ids)
    arrays = [np.asarray(f, dtype=np.float64) for f in frames]
    for f in arrays:
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] != dim:
            raise ContractError(f"encode expects a non-empty T x {dim} frame matrix, got {f.shape}")

    n = len(arrays)
    x = np.zeros((max(f.shape[0] for f in arrays), n, dim))
    frame_mask = np.zeros((n, x.shape[0]), dtype=bool)
    for b, f in enumerate(arrays):
        x[:f.shape[0], b] = f
        frame_mask[b, :f.shape[0]] = True
    tokens = np.full((n, max(len(r) for r in rows)), PAD, dtype=np.int64)
    for b, r in enumerate(rows):
        tokens[b, :len(r)] = r
    return x, frame_mask, tokens


def forward_batch(frames: Sequence[np.ndarray], targets: Sequence, params: Weights) -> BatchForward:
    """Teacher-forced decoding of several utterances in one graph.

    Frames are zero-padded and masked out of attention, targets are PAD-padded
    after EOS. Real positions match forward_teacher_forced per utterance.
    """
    w = _bound(params)
    x, frame_mask, tokens = _pad_batch(frames, targets, w["enc_Wx"].shape[1])
    n, hidden = tokens.shape[0], w["enc_Wh"].shape[0]

    inputs = nx.einsum("tbd,hd->tbh", Tensor(x), w["enc_Wx"])
    state = Tensor(np.zeros((n, hidden)))
    states = []
    for t in range(x.shape[0]):
        state = nx.tanh(nx.add_bias(nx.row(inputs, t) + nx.einsum("bk,hk->bh", state, w["enc_Wh"]), w["enc_b"]))
        states.append(state)
    enc_states = nx.stack(states)

    keep = Tensor(frame_mask.astype(np.float64))
    state = Tensor(np.zeros((n, hidden)))
    hs, lps, projs = [], [], []
    for i in range(1, tokens.shape[1]):
        scores = nx.einsum("tbh,bh->bt", enc_states, state)
        attn = nx.exp(nx.log_softmax(scores, frame_mask)) * keep
        context = nx.einsum("tbh,bt->bh", enc_states, attn)
        x_in = nx.concat([nx.take(w["emb"], tokens[:, i - 1]), context], axis=1)
        state = nx.tanh(nx.add_bias(nx.einsum("bx,hx->bh", x_in, w["dec_Wx"])
                                    + nx.einsum("bk,hk->bh", state, w["dec_Wh"]), w["dec_b"]))
        hs.append(state)
        lps.append(nx.log_softmax(nx.add_bias(nx.einsum("bh,vh->bv", state, w["g_W"]), w["g_b"])))
        projs.append(nx.add_bias(nx.einsum("bh,ph->bp", state, w["f_W"]), w["f_b"]))
    return BatchForward(nx.stack(hs), nx.stack(lps), nx.stack(projs), tokens)


def decode_step(prev_token: int, decoder_state: Optional[Tensor], encoder_states: Tensor,
                params: Weights) -> Tuple[Tensor, Tensor, Tensor]:
    """Single inference step: (h, log-probs, new_state); same math as a teacher-forced step"""
    w = _bound(params)
    if decoder_state is None:
        decoder_state = initial_state(w)
    new_state, logprobs, _ = _decoder_step(w, _check_token(prev_token), decoder_state, encoder_states)
    return new_state, logprobs, new_state


def greedy_decode(frames: np.ndarray, params: Weights, max_len: int) -> List[int]:
    """Argmax decoding; returns tokens after SOS (EOS included when emitted)"""
    w = _bound(params)
    enc_states = encode(frames, w)
    state = initial_state(w)
    tokens: List[int] = []
    prev = SOS
    for _ in range(max_len):
        _, logprobs, state = decode_step(prev, state, enc_states, w)
        prev = int(np.argmax(logprobs.data))
        tokens.append(prev)
        if prev == EOS:
            break
    return tokens


# ======================================================
# Checkpoints
# ======================================================

CHECKPOINT_MAGIC = b"ACLCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str, extra: Optional[Dict[str, np.ndarray]] = None) -> str:
    """Versioned header + dims + meta, then one little-endian fp64 blob per named matrix"""
    cfg = params.config
    blobs = list(params.weights.items()) + list((extra or {}).items())
    meta = json.dumps(params.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<5I", cfg.dim, cfg.hidden, cfg.embed, cfg.proj, cfg.vocab))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    return params.checkpoint_id


def read_checkpoint_blobs(path: str) -> Tuple[ModelConfig, Dict, "OrderedDict[str, np.ndarray]"]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    offset = 8
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from("<5I", raw, offset)
    offset += 20
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    return ModelConfig(*dims), meta, blobs


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> ModelParams:
    """Load model weights; any matrix whose shape disagrees with `expected` is named in the error"""
    config, meta, blobs = read_checkpoint_blobs(path)
    reference = expected or config
    for name, shape in reference.shapes().items():
        if name not in blobs:
            raise CheckpointError(f"checkpoint {path} is missing matrix '{name}'", name)
        if blobs[name].shape != shape:
            raise CheckpointError(f"matrix '{name}' in {path} has shape {blobs[name].shape}, "
                                  f"model expects {shape}", name)
    return ModelParams(reference, {name: blobs[name] for name in reference.shapes()}, meta)
