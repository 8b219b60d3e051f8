"""
Synthetic desk-scale corpora.

Speech is stood in for by amplitude-modulated harmonic tones; noise domains
are coloured Gaussian noises whose power spectrum falls or rises as
``f ** exponent``. ``make_toy_corpus`` writes a source domain (tones + white
noise, with clean references), unpaired target recordings (tones + pink
noise), a held-out target test set and the clean pool. ``make_noise_class_corpus``
writes a labelled five-colour corpus for encoder fine-tuning.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from tqdm import tqdm

from . import dsp
from .adapt_eval import mix_at_snr
from .data import Domain, DomainRules, Manifest, build_manifest
from .errors import ConfigurationError
from .simulate import SimulatedPair, write_pairs

logger = logging.getLogger(__name__)

NOISE_EXPONENTS = {
    "white": 0.0,
    "pink": -1.0,
    "brown": -2.0,
    "blue": 1.0,
    "violet": 2.0,
}
TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0)
TEST_SNRS = (2.5, 7.5, 12.5, 17.5)


def coloured_noise(
    num_samples: int, colour: str, rng: np.random.Generator, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
) -> dsp.Waveform:
    """Unit-RMS Gaussian noise with power spectral density proportional to ``f ** exponent``."""
    if colour not in NOISE_EXPONENTS:
        raise ConfigurationError(f"Unknown noise colour '{colour}'; known: {sorted(NOISE_EXPONENTS)}")
    white = rng.standard_normal(num_samples)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(num_samples)
    freqs[0] = freqs[1] if len(freqs) > 1 else 1.0
    spectrum *= freqs ** (NOISE_EXPONENTS[colour] / 2.0)
    shaped = np.fft.irfft(spectrum, n=num_samples)
    shaped /= np.sqrt(np.mean(shaped**2))
    return dsp.Waveform(shaped, sample_rate)


def harmonic_tone(
    num_samples: int,
    rng: np.random.Generator,
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE,
    harmonics: int = 5,
) -> dsp.Waveform:
    """Random-pitch harmonic complex with a syllable-rate envelope, peak 0.5."""
    t = np.arange(num_samples) / sample_rate
    f0 = rng.uniform(120.0, 300.0)
    x = np.zeros(num_samples)
    for k in range(1, harmonics + 1):
        x += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    rate = rng.uniform(2.0, 6.0)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x *= envelope
    x *= 0.5 / np.max(np.abs(x))
    return dsp.Waveform(x, sample_rate)


def _write_mixtures(
    out_dir: Path,
    prefix: str,
    count: int,
    colour: str,
    snrs: Sequence[float],
    num_samples: int,
    rng: np.random.Generator,
    reference_dir: Optional[Path] = None,
    show_progress: bool = False,
):
    out_dir.mkdir(parents=True, exist_ok=True)
    if reference_dir is not None:
        reference_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in tqdm(range(count), desc=prefix, leave=False, disable=not show_progress):
        snr = float(snrs[i % len(snrs)])
        clean = harmonic_tone(num_samples, rng)
        noise = coloured_noise(num_samples, colour, rng)
        noisy = mix_at_snr(clean, noise, snr)
        peak = float(np.max(np.abs(noisy.samples)))
        if peak > 1.0:
            # one gain for the pair
            noisy = dsp.Waveform(noisy.samples / peak, noisy.sample_rate)
            clean = dsp.Waveform(clean.samples / peak, clean.sample_rate)
        name = f"{prefix}_{i:03d}__{colour}__{snr:g}dB.wav"
        dsp.write_wav(out_dir / name, noisy)
        if reference_dir is not None:
            dsp.write_wav(reference_dir / name, clean)
        names.append(name)
    return names


def make_toy_corpus(
    out_dir,
    n_clean: int = 40,
    n_source: int = 40,
    n_target: int = 40,
    n_test: int = 20,
    duration: float = 1.0,
    source_noise: str = "white",
    target_noise: str = "pink",
    seed: int = 0,
    show_progress: bool = False,
) -> Dict[str, Manifest]:
    """Write the toy domains under ``out_dir`` and their manifests under ``out_dir/manifests``.

    Returns
    -------
    dict
        ``clean``, ``source``, ``target`` and ``test`` manifests. ``source``
        and ``test`` carry clean references; ``out_dir/source_pairs.jsonl``
        lists the source pairs in the pair-manifest format so an SE model
        can be pre-trained on them.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    num_samples = int(round(duration * dsp.DEFAULT_SAMPLE_RATE))

    clean_dir = out_dir / "clean"
    clean_dir.mkdir(parents=True, exist_ok=True)
    for i in tqdm(range(n_clean), desc="clean", leave=False, disable=not show_progress):
        dsp.write_wav(clean_dir / f"clean_{i:03d}.wav", harmonic_tone(num_samples, rng))

    _write_mixtures(
        out_dir / "source", "src", n_source, source_noise, TRAIN_SNRS, num_samples, rng,
        reference_dir=out_dir / "source_clean", show_progress=show_progress,
    )
    _write_mixtures(
        out_dir / "target", "tgt", n_target, target_noise, TRAIN_SNRS, num_samples, rng,
        show_progress=show_progress,
    )
    _write_mixtures(
        out_dir / "test", "test", n_test, target_noise, TEST_SNRS, num_samples, rng,
        reference_dir=out_dir / "test_clean", show_progress=show_progress,
    )

    manifests = {
        "clean": build_manifest(clean_dir, DomainRules(domain=Domain.SOURCE_CLEAN, pattern=None)),
        "source": build_manifest(
            out_dir / "source", DomainRules(reference_dir=str(out_dir / "source_clean"))
        ),
        "target": build_manifest(out_dir / "target"),
        "test": build_manifest(out_dir / "test", DomainRules(reference_dir=str(out_dir / "test_clean"))),
    }
    (out_dir / "manifests").mkdir(exist_ok=True)
    for name, manifest in manifests.items():
        manifest.write(out_dir / "manifests" / f"{name}.jsonl")

    pairs = [
        SimulatedPair(e.utterance_id, e.utterance_id, 0.0, e.audio_path, e.reference_path)
        for e in manifests["source"]
    ]
    write_pairs(pairs, out_dir / "source_pairs.jsonl")
    logger.info(
        "Toy corpus in %s: %s",
        out_dir,
        ", ".join(f"{k}={len(v)}" for k, v in manifests.items()),
    )
    return manifests


def make_noise_class_corpus(
    out_dir,
    colours: Sequence[str] = tuple(NOISE_EXPONENTS),
    per_class: int = 16,
    duration: float = 1.0,
    snr_db: float = 5.0,
    seed: int = 0,
    show_progress: bool = False,
) -> Manifest:
    """Tones mixed with each coloured noise at ``snr_db``, labelled by colour in the file name."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    num_samples = int(round(duration * dsp.DEFAULT_SAMPLE_RATE))
    for colour in colours:
        _write_mixtures(
            out_dir / "audio", colour, per_class, colour, (snr_db,), num_samples, rng,
            show_progress=show_progress,
        )
    manifest = build_manifest(out_dir / "audio")
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
