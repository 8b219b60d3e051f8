import numpy as np
import pytest

from noise_adapt import dsp, toy
from noise_adapt.adapt_eval import spectral_profile
from noise_adapt.data import Domain, Manifest
from noise_adapt.errors import ConfigurationError
from noise_adapt.simulate import read_pairs


@pytest.mark.parametrize("colour", sorted(toy.NOISE_EXPONENTS))
def test_coloured_noise_slope(colour, rng):
    noise = toy.coloured_noise(32000, colour, rng)
    assert len(noise) == 32000
    assert np.sqrt(np.mean(noise.samples**2)) == pytest.approx(1.0)
    profile = spectral_profile([noise])
    freqs = np.arange(1, 129)
    # natural log of magnitude ~ exponent / 2 * log f
    slope = np.polyfit(np.log(freqs), profile[1:], 1)[0]
    assert slope == pytest.approx(toy.NOISE_EXPONENTS[colour] / 2.0, abs=0.15)


def test_unknown_colour(rng):
    with pytest.raises(ConfigurationError):
        toy.coloured_noise(100, "plaid", rng)


def test_harmonic_tone(rng):
    tone = toy.harmonic_tone(8000, rng)
    assert np.max(np.abs(tone.samples)) == pytest.approx(0.5)


def test_make_toy_corpus(tmp_path):
    manifests = toy.make_toy_corpus(tmp_path, n_clean=3, n_source=4, n_target=5, n_test=4, duration=0.2)
    assert {k: len(v) for k, v in manifests.items()} == {"clean": 3, "source": 4, "target": 5, "test": 4}
    assert all(e.domain is Domain.SOURCE_CLEAN for e in manifests["clean"])
    assert [e.snr_db for e in manifests["target"]] == [0.0, 5.0, 10.0, 15.0, 0.0]
    assert {e.noise_type for e in manifests["target"]} == {"pink"}
    assert {e.noise_type for e in manifests["source"]} == {"white"}
    assert all(e.reference_path for e in manifests["test"])
    assert all(e.reference_path is None for e in manifests["target"])
    for name, manifest in manifests.items():
        assert Manifest.read(tmp_path / "manifests" / f"{name}.jsonl") == manifest

    for e in manifests["test"]:
        noisy = dsp.read_wav(e.audio_path)
        clean = dsp.read_wav(e.reference_path)
        assert dsp.estimate_snr(noisy, clean) == pytest.approx(e.snr_db, abs=0.05)

    pairs = read_pairs(tmp_path / "source_pairs.jsonl")
    assert [p.clean_id for p in pairs] == manifests["source"].ids
    assert all(p.sigma_used == 0.0 for p in pairs)


def test_make_toy_corpus_is_seeded(tmp_path):
    a = toy.make_toy_corpus(tmp_path / "a", 1, 1, 1, 1, duration=0.1, seed=3)
    b = toy.make_toy_corpus(tmp_path / "b", 1, 1, 1, 1, duration=0.1, seed=3)
    for name in a:
        wa = dsp.read_wav(a[name].entries[0].audio_path).samples
        wb = dsp.read_wav(b[name].entries[0].audio_path).samples
        np.testing.assert_array_equal(wa, wb)


def test_make_noise_class_corpus(tmp_path):
    manifest = toy.make_noise_class_corpus(tmp_path, per_class=2, duration=0.1)
    assert manifest.noise_types == sorted(toy.NOISE_EXPONENTS)
    assert all(len(v) == 2 for v in manifest.by_noise_type().values())
    assert Manifest.read(tmp_path / "manifest.jsonl") == manifest
