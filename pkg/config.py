"""
Configuration settings for accent-invariant contrastive training experiments
"""

import configparser
import logging
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from augment import AugmentConfig
from corpus import CorpusConfig
from decode_eval import DecodeConfig
from errors import ConfigError
from model import ModelConfig
from trainer import MatrixConfig, TrainSettings

logger = logging.getLogger(__name__)

ENV_PREFIX = "ACCENT_CL_"
OUTPUT_ROOT_ENV = "ACCENT_CL_OUTPUT_ROOT"

# Synthetic corpus
CORPUS_CONFIG = {
    "dim": 20,
    "lexicon_size": 50,
    "word_len_min": 2,
    "word_len_max": 7,
    "words_min": 1,
    "words_max": 4,
    "train_sentences": 400,
    "val_sentences": 100,
    "test_sentences": 120,
    "num_train_accents": 5,
    "num_val_accents": 3,
    "num_test_accents": 5,
    "train_gamma": 0.3,
    "val_gamma": 0.375,
    "test_gamma": 0.45,
    "voice_gamma": 0.3,
    "duration_min": 3,
    "duration_max": 5,
    "voice_duration_min": 2,
    "voice_duration_max": 6,
    "noise_sigma": 0.05,
    "seed": 0,
    "workers": 1,
}

# View augmentation
AUGMENT_CONFIG = {
    "noise_prob": 0.5,
    "noise_scale": 0.3,
    "specaug_prob": 0.25,
    "freq_mask_width": 4,
    "time_mask_width": 4,
    "num_masks": 1,
    "altvoice_prob": 0.5,
}

# Encoder-decoder sizes (D/H/E/P)
MODEL_CONFIG = {
    "dim": 20,
    "hidden": 64,
    "embed": 32,
    "proj": 16,
}

# Optimization, both stages
TRAIN_CONFIG = {
    "pretrain_lr": 2.83e-4,
    "finetune_lr": 8e-5,
    "pretrain_max_epochs": 10,
    "finetune_max_epochs": 10,
    "fullshot_max_epochs": 5,
    "pretrain_max_steps": 300,  # 0 = epochs only
    "finetune_max_steps": 150,
    "fullshot_max_steps": 20,
    "batch_size": 16,
    "patience": 5,
    "eval_interval": 50,
    "tau": 0.07,
    "cap_per_class": 20,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "log_interval": 10,
    "val_limit": 60,  # 0 = whole validation split
    "seed": 0,
}

# Beam search
DECODE_CONFIG = {
    "beam_size": 5,
    "lam": 0.1,
    "max_len": 0,  # 0 = max_len_factor x reference length
    "max_len_factor": 2.0,
    "method": "beam",
    "workers": 1,
}

# Experiment grid
MATRIX_CONFIG = {
    "modes": ["joint", "proposed"],
    "augmentations": ["none", "noise", "specaug", "altvoice", "all"],
    "shots": ["zero", "full"],
    "seeds": [0],
    "holdout_per_accent": 100,
    "parallel": 1,
}

# Output locations
OUTPUT_CONFIG = {
    "dir": "runs",
}

SECTIONS = {
    "corpus": CORPUS_CONFIG,
    "augment": AUGMENT_CONFIG,
    "model": MODEL_CONFIG,
    "train": TRAIN_CONFIG,
    "decode": DECODE_CONFIG,
    "matrix": MATRIX_CONFIG,
    "output": OUTPUT_CONFIG,
}


def _coerce(raw: str, default: Any, section: str, key: str) -> Any:
    name = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            element = type(default[0]) if default else str
            return [element(item.strip()) for item in raw.split(",") if item.strip()]
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"invalid value {raw!r} for {name} (expected {type(default).__name__})", name) from e


def _format(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfigManager:
    """Resolved experiment configuration: environment, then config file, then defaults"""

    def __init__(self, path: Optional[str] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None):
        load_dotenv()
        self.path = path
        self.file_values = self._read_file(path) if path else {}
        self.config = self.load_configuration()
        for section, values in (overrides or {}).items():
            for key, value in values.items():
                self.update(section, key, value)

    def _read_file(self, path: str) -> Dict[str, Dict[str, str]]:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        values: Dict[str, Dict[str, str]] = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}] in {path}", section)
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown config key '{section}.{key}' in {path}", f"{section}.{key}")
                values.setdefault(section, {})[key] = raw
        return values

    def load_configuration(self) -> Dict[str, Dict[str, Any]]:
        config = {}
        for section, defaults in SECTIONS.items():
            config[section] = {key: self._get_config_value(section, key, default)
                               for key, default in defaults.items()}
        return config

    @staticmethod
    def env_name(section: str, key: str) -> str:
        if (section, key) == ("output", "dir"):
            return OUTPUT_ROOT_ENV
        return f"{ENV_PREFIX}{section.upper()}_{key.upper()}"

    def _get_config_value(self, section: str, key: str, default: Any) -> Any:
        """Environment variable, then config file, then default"""
        raw = os.getenv(self.env_name(section, key))
        if raw is None:
            raw = self.file_values.get(section, {}).get(key)
        if raw is None:
            return list(default) if isinstance(default, list) else default
        return _coerce(raw, default, section, key)

    def get(self, section: str, key: str) -> Any:
        return self.config[section][key]

    def update(self, section: str, key: str, value: Any) -> None:
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise ConfigError(f"unknown config key '{section}.{key}'", f"{section}.{key}")
        self.config[section][key] = value

    # Typed views

    def corpus(self) -> CorpusConfig:
        cfg = CorpusConfig(**self.config["corpus"])
        cfg.validate()
        return cfg

    def augment(self) -> AugmentConfig:
        cfg = AugmentConfig(**self.config["augment"])
        cfg.validate(dim=self.config["corpus"]["dim"])
        return cfg

    def model(self) -> ModelConfig:
        cfg = ModelConfig(**self.config["model"])
        cfg.validate()
        if cfg.dim != self.config["corpus"]["dim"]:
            raise ConfigError(f"model.dim ({cfg.dim}) must equal corpus.dim ({self.config['corpus']['dim']})",
                              "model.dim")
        return cfg

    def train(self) -> TrainSettings:
        return TrainSettings(**self.config["train"])

    def decode(self) -> DecodeConfig:
        cfg = DecodeConfig(**self.config["decode"])
        cfg.validate()
        return cfg

    def matrix(self) -> MatrixConfig:
        cfg = MatrixConfig(**{k: list(v) if isinstance(v, list) else v for k, v in self.config["matrix"].items()})
        cfg.validate()
        return cfg

    @property
    def output_dir(self) -> str:
        return self.config["output"]["dir"]

    @property
    def corpus_dir(self) -> str:
        return os.path.join(self.output_dir, "corpus")

    def write_resolved(self, path: str) -> None:
        """Write every section with defaults filled in, in the input format"""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, values in self.config.items():
            parser[section] = {key: _format(value) for key, value in values.items()}
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            parser.write(f)
