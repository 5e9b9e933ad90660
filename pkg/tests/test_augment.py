import numpy as np
import pytest

from augment import AugmentConfig, ViewBuilder, altvoice_render, expected_masked_fraction, inject_noise, spec_augment
from corpus import build_prototypes, make_accent, render_utterance
from errors import AugmentError, ConfigError

DIM = 8


@pytest.fixture(scope="module")
def prototypes():
    return build_prototypes(0, DIM)


@pytest.fixture(scope="module")
def accent():
    return make_accent("tr0", DIM, 0.3, seed=1, duration_range=(1, 2))


@pytest.fixture(scope="module")
def voice():
    return make_accent("voice", DIM, 0.3, seed=2, duration_range=(1, 2))


@pytest.fixture(scope="module")
def utterance(prototypes, accent):
    return render_utterance("ab cd", accent, prototypes, noise_sigma=0.05, seed=3, utt_id="tr0-0000")


def off(**probs) -> AugmentConfig:
    values = dict(noise_prob=0.0, specaug_prob=0.0, altvoice_prob=0.0)
    values.update(probs)
    return AugmentConfig(**values)


class TestNoise:
    def test_zero_scale_is_identity(self, rng):
        frames = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(inject_noise(frames, 0.0, rng), frames)

    def test_seeded(self):
        frames = np.ones((3, 3))
        np.testing.assert_array_equal(inject_noise(frames, 0.3, 7, rms=2.0), inject_noise(frames, 0.3, 7, rms=2.0))

    def test_perturbation_energy(self):
        frames = np.zeros((100, 100))
        out = inject_noise(frames, 0.3, 0, rms=1.7)
        assert np.mean(out ** 2) == pytest.approx((0.3 * 1.7) ** 2, rel=0.05)

    def test_negative_scale(self):
        with pytest.raises(AugmentError):
            inject_noise(np.ones((2, 2)), -0.1, 0)


class TestSpecAugment:
    def test_zero_widths_identity(self, rng):
        frames = rng.standard_normal((6, DIM))
        cfg = AugmentConfig(freq_mask_width=0, time_mask_width=0)
        np.testing.assert_array_equal(spec_augment(frames, cfg, rng), frames)

    def test_only_mask_cells_change(self, rng):
        frames = rng.standard_normal((10, DIM)) + 5.0
        out = spec_augment(frames, AugmentConfig(), 3)
        changed = out != frames
        assert np.all(out[changed] == 0.0)
        rows = np.flatnonzero(changed.all(axis=1))
        cols = np.flatnonzero(changed.all(axis=0))
        assert len(rows) <= 4 and len(cols) <= 4
        outside = ~changed
        np.testing.assert_array_equal(out[outside], frames[outside])

    def test_masked_fraction_matches_expectation(self):
        frames = np.ones((20, 20))
        cfg = AugmentConfig()
        rng = np.random.default_rng(0)
        zeroed = np.mean([np.mean(spec_augment(frames, cfg, rng) == 0.0) for _ in range(10000)])
        assert zeroed == pytest.approx(expected_masked_fraction(20, 20, 4, 4), rel=0.05)

    def test_width_must_fit(self, rng):
        with pytest.raises(AugmentError):
            spec_augment(np.ones((3, DIM)), AugmentConfig(time_mask_width=3), rng)


class TestAltVoice:
    def test_text_preserved(self, utterance, voice, prototypes):
        view = altvoice_render(utterance, voice, prototypes, 0)
        assert view.text == utterance.text
        np.testing.assert_array_equal(view.target, utterance.target)
        assert view.view_tag == "altvoice"

    def test_same_accent_same_seed_is_identical(self, utterance, accent, prototypes):
        view = altvoice_render(utterance, accent, prototypes, utterance.render_seed, noise_sigma=0.05)
        np.testing.assert_array_equal(view.frames, utterance.frames)

    def test_differs_from_original(self, prototypes):
        a = make_accent("tr1", DIM, 0.3, seed=4, duration_range=(2, 2))
        b = make_accent("voice", DIM, 0.45, seed=5, duration_range=(2, 2))
        utt = render_utterance("abc", a, prototypes, seed=6)
        view = altvoice_render(utt, b, prototypes, 6)
        assert np.linalg.norm(view.frames - utt.frames) > 0


class TestMakeViews:
    def test_no_augmentation_gives_original_only(self, utterance, voice, prototypes):
        views = ViewBuilder(off(), voice, prototypes, 1.0).make_views(utterance, 0)
        assert len(views) == 1 and views[0].view_tag == "original"
        np.testing.assert_array_equal(views[0].frames, utterance.frames)

    def test_forced_augmentation(self, utterance, voice, prototypes):
        cfg = AugmentConfig(noise_prob=1.0, specaug_prob=1.0, altvoice_prob=1.0)
        views = ViewBuilder(cfg, voice, prototypes, 1.0).make_views(utterance, 0)
        assert len(views) >= 2
        assert all(v.view_tag == "combined" for v in views[1:])
        for v in views:
            np.testing.assert_array_equal(v.target, utterance.target)
            assert v.source_utterance_id == utterance.utt_id

    def test_shapes(self, utterance, voice, prototypes):
        cfg = AugmentConfig(noise_prob=1.0, specaug_prob=1.0, altvoice_prob=0.0)
        views = ViewBuilder(cfg, voice, prototypes, 1.0).make_views(utterance, 1)
        assert all(v.frames.shape == utterance.frames.shape for v in views)

    def test_deterministic(self, utterance, voice, prototypes):
        a = ViewBuilder(AugmentConfig(), voice, prototypes, 1.0).make_views(utterance, 42)
        b = ViewBuilder(AugmentConfig(), voice, prototypes, 1.0).make_views(utterance, 42)
        assert [v.view_tag for v in a] == [v.view_tag for v in b]
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.frames, vb.frames)

    def test_altvoice_rate(self, utterance, voice, prototypes):
        builder = ViewBuilder(off(altvoice_prob=0.5), voice, prototypes, 1.0)
        rng = np.random.default_rng(0)
        hits = sum(any("altvoice" in v.applied for v in builder.make_views(utterance, rng)) for _ in range(10000))
        assert hits / 10000 == pytest.approx(0.5, abs=0.02)

    def test_noise_and_specaug_rates(self, utterance, voice, prototypes):
        builder = ViewBuilder(AugmentConfig(altvoice_prob=1.0), voice, prototypes, 1.0)
        rng = np.random.default_rng(1)
        noise = specaug = 0
        for _ in range(10000):
            alt = [v for v in builder.make_views(utterance, rng) if "altvoice" in v.applied][0]
            noise += "noise" in alt.applied
            specaug += "specaug" in alt.applied
        assert noise / 10000 == pytest.approx(0.5, abs=0.02)
        assert specaug / 10000 == pytest.approx(0.25, abs=0.02)

    def test_voice_must_be_reserved(self, accent, prototypes):
        with pytest.raises(ConfigError):
            ViewBuilder(AugmentConfig(), accent, prototypes, 1.0, corpus_accents=["tr0", "tr1"])


class TestAugmentConfig:
    def test_probabilities_validated(self):
        with pytest.raises(ConfigError):
            AugmentConfig(noise_prob=1.5).validate()

    def test_freq_mask_must_fit_dim(self):
        with pytest.raises(ConfigError):
            AugmentConfig(freq_mask_width=8).validate(dim=8)

    def test_for_augmentation(self):
        cfg = AugmentConfig().for_augmentation("specaug")
        assert (cfg.noise_prob, cfg.specaug_prob, cfg.altvoice_prob) == (0.0, 0.25, 0.0)
        assert not AugmentConfig().for_augmentation("none").enabled
        with pytest.raises(ConfigError):
            AugmentConfig().for_augmentation("tempo")
