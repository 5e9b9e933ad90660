"""
Alternative views of utterances for contrastive learning: Gaussian noise
injection, single frequency/time masking, and re-rendering the same sentence
through a reserved synthetic voice.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from corpus import AccentProfile, Utterance, render_utterance
from errors import AugmentError, ConfigError

logger = logging.getLogger(__name__)

VIEW_TAGS = ("original", "noise", "specaug", "altvoice", "combined")
AUGMENTATIONS = ("none", "noise", "specaug", "altvoice", "all")

RngLike = Union[int, np.random.Generator]


@dataclass
class AugmentConfig:
    noise_prob: float = 0.5
    noise_scale: float = 0.3
    specaug_prob: float = 0.25
    freq_mask_width: int = 4
    time_mask_width: int = 4
    num_masks: int = 1
    altvoice_prob: float = 0.5

    def validate(self, dim: Optional[int] = None) -> None:
        for key in ("noise_prob", "specaug_prob", "altvoice_prob"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment.{key} must be in [0, 1], got {value}", key)
        if self.noise_scale < 0:
            raise ConfigError("augment.noise_scale must be >= 0", "noise_scale")
        if self.freq_mask_width < 0 or self.time_mask_width < 0:
            raise ConfigError("augment mask widths must be >= 0", "freq_mask_width")
        if self.num_masks != 1:
            raise ConfigError("augment.num_masks: only one mask of each kind is supported", "num_masks")
        if dim is not None and self.freq_mask_width >= dim:
            raise ConfigError(f"augment.freq_mask_width must be < feature dim {dim}", "freq_mask_width")

    @property
    def enabled(self) -> bool:
        return self.noise_prob > 0 or self.specaug_prob > 0 or self.altvoice_prob > 0

    def for_augmentation(self, name: str) -> "AugmentConfig":
        """Copy with only the named augmentation switched on (none/noise/specaug/altvoice/all)"""
        if name not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation '{name}'", "augmentations")
        keep = {
            "none": (),
            "noise": ("noise_prob",),
            "specaug": ("specaug_prob",),
            "altvoice": ("altvoice_prob",),
            "all": ("noise_prob", "specaug_prob", "altvoice_prob"),
        }[name]
        out = replace(self)
        for key in ("noise_prob", "specaug_prob", "altvoice_prob"):
            if key not in keep:
                setattr(out, key, 0.0)
        return out


@dataclass(eq=False)
class View:
    frames: np.ndarray
    source_utterance_id: str
    view_tag: str
    text: str
    target: np.ndarray
    accent_id: str
    applied: Tuple[str, ...] = field(default_factory=tuple)


def _rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def inject_noise(frames: np.ndarray, scale: float, rng: RngLike, rms: float = 1.0) -> np.ndarray:
    """frames + scale·rms·eta, eta standard Gaussian per element"""
    if scale < 0:
        raise AugmentError(f"noise scale must be >= 0, got {scale}")
    eta = _rng(rng).standard_normal(frames.shape)
    return frames + (scale * rms) * eta


def spec_augment(frames: np.ndarray, cfg: AugmentConfig, rng: RngLike) -> np.ndarray:
    """Zero one feature band and one time span; widths and offsets drawn uniformly"""
    t_len, dim = frames.shape
    if cfg.freq_mask_width >= dim or cfg.time_mask_width >= t_len:
        raise AugmentError(f"mask widths ({cfg.freq_mask_width}, {cfg.time_mask_width}) "
                           f"must be smaller than frames {frames.shape}")
    rng = _rng(rng)
    out = frames.copy()
    f = int(rng.integers(0, cfg.freq_mask_width + 1))
    f0 = int(rng.integers(0, dim - f + 1))
    out[:, f0:f0 + f] = 0.0
    t = int(rng.integers(0, cfg.time_mask_width + 1))
    t0 = int(rng.integers(0, t_len - t + 1))
    out[t0:t0 + t, :] = 0.0
    return out


def expected_masked_fraction(t_len: int, dim: int, freq_width: int, time_width: int) -> float:
    """Closed-form expected fraction of cells zeroed by spec_augment"""
    ef = freq_width / 2.0
    et = time_width / 2.0
    # widths are independent, so E[f·t] = E[f]·E[t]
    return (ef * t_len + et * dim - ef * et) / (t_len * dim)


def altvoice_render(utterance: Utterance, voice: AccentProfile, prototypes: Dict[str, np.ndarray],
                    rng: RngLike, noise_sigma: float = 0.05) -> View:
    """Re-render the same sentence through the reserved synthetic voice"""
    seed = int(rng.integers(0, 2 ** 63 - 1)) if isinstance(rng, np.random.Generator) else int(rng)
    rendered = render_utterance(utterance.text, voice, prototypes, noise_sigma, seed)
    return View(rendered.frames, utterance.utt_id, "altvoice", utterance.text, utterance.target,
                utterance.accent_id, ("altvoice",))


def original_view(utterance: Utterance) -> View:
    return View(utterance.frames, utterance.utt_id, "original", utterance.text, utterance.target,
                utterance.accent_id)


def _tag(applied: Sequence[str]) -> str:
    if not applied:
        return "original"
    if len(applied) == 1:
        return applied[0]
    return "combined"


class ViewBuilder:
    """Builds the list of views for an utterance from one AugmentConfig"""

    def __init__(self, cfg: AugmentConfig, voice: AccentProfile, prototypes: Dict[str, np.ndarray],
                 rms: float, noise_sigma: float = 0.05, corpus_accents: Sequence[str] = ()):
        cfg.validate(dim=voice.transform.shape[0])
        if voice.accent_id in set(corpus_accents):
            raise ConfigError(f"alternate voice '{voice.accent_id}' collides with a corpus accent", "altvoice")
        self.cfg = cfg
        self.voice = voice
        self.prototypes = prototypes
        self.rms = rms
        self.noise_sigma = noise_sigma

    def make_views(self, utterance: Utterance, rng: RngLike) -> List[View]:
        """Original view, plus an augmented copy and/or an alternate-voice view when drawn"""
        rng = _rng(rng)
        cfg = self.cfg
        views = [original_view(utterance)]

        copies: List[Tuple[np.ndarray, List[str]]] = [(utterance.frames, [])]
        if rng.random() < cfg.altvoice_prob:
            alt = altvoice_render(utterance, self.voice, self.prototypes, rng, self.noise_sigma)
            copies.append((alt.frames, ["altvoice"]))

        for frames, applied in copies:
            if rng.random() < cfg.noise_prob:
                frames = inject_noise(frames, cfg.noise_scale, rng, self.rms)
                applied.append("noise")
            if rng.random() < cfg.specaug_prob:
                mask_cfg = cfg
                if frames.shape[0] <= cfg.time_mask_width:
                    mask_cfg = replace(cfg, time_mask_width=frames.shape[0] - 1)
                frames = spec_augment(frames, mask_cfg, rng)
                applied.append("specaug")
            if applied:
                views.append(View(frames, utterance.utt_id, _tag(applied), utterance.text, utterance.target,
                                  utterance.accent_id, tuple(applied)))
        return views

