import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from corpus import CorpusConfig, generate_corpus  # noqa: E402
from model import ModelConfig, init_params  # noqa: E402


def tiny_corpus_config(**overrides) -> CorpusConfig:
    values = dict(
        dim=8, lexicon_size=8, word_len_min=2, word_len_max=3, words_min=1, words_max=2,
        train_sentences=4, val_sentences=3, test_sentences=4,
        num_train_accents=2, num_val_accents=1, num_test_accents=2,
        duration_min=1, duration_max=2, voice_duration_min=1, voice_duration_max=2, seed=0,
    )
    values.update(overrides)
    return CorpusConfig(**values)


@pytest.fixture
def corpus_config() -> CorpusConfig:
    return tiny_corpus_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(tiny_corpus_config())


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(dim=8, hidden=6, embed=4, proj=3)


@pytest.fixture
def tiny_params(model_config):
    return init_params(model_config, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "[corpus]\n"
        "dim = 8\n"
        "lexicon_size = 8\n"
        "word_len_min = 2\n"
        "word_len_max = 3\n"
        "words_min = 1\n"
        "words_max = 2\n"
        "train_sentences = 4\n"
        "val_sentences = 3\n"
        "test_sentences = 4\n"
        "num_train_accents = 2\n"
        "num_val_accents = 1\n"
        "num_test_accents = 2\n"
        "duration_min = 1\n"
        "duration_max = 2\n"
        "voice_duration_min = 1\n"
        "voice_duration_max = 2\n"
        "\n"
        "[model]\n"
        "dim = 8\n"
        "hidden = 6\n"
        "embed = 4\n"
        "proj = 3\n"
        "\n"
        "[train]\n"
        "pretrain_max_epochs = 1\n"
        "finetune_max_epochs = 1\n"
        "fullshot_max_epochs = 1\n"
        "batch_size = 4\n"
        "eval_interval = 2\n"
        "log_interval = 1\n"
        "\n"
        "[decode]\n"
        "beam_size = 2\n"
        "max_len = 8\n"
        "\n"
        "[matrix]\n"
        "modes = joint, proposed\n"
        "augmentations = none, all\n"
        "holdout_per_accent = 2\n"
        "\n"
        f"[output]\n"
        f"dir = {tmp_path / 'runs'}\n"
    )
    return str(path)
