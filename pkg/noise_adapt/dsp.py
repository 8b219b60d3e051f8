"""
Deterministic time-frequency front end.

STFT analysis/synthesis, magnitude compression, fixed-size segmentation,
waveform reconstruction and SNR estimation. Everything in here is a pure
function of its inputs.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import soundfile as sf
import torch

from .errors import InvalidInputError, PhaseRequiredError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000

SEGMENT_BINS = 129
SEGMENT_FRAMES = 128

COMPRESSIONS = ("linear", "log1p")


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"Waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("Waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be > 0, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def normalized(self) -> "Waveform":
        """Scale down so that every |sample| <= 1. Quiet signals are untouched."""
        peak = float(np.max(np.abs(self.samples))) if len(self.samples) else 0.0
        if peak <= 1.0:
            return self
        return Waveform(self.samples / peak, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 256
    hop: int = 128
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop <= 0:
            raise InvalidInputError("n_fft and hop must be positive")
        if self.hop > self.n_fft:
            raise InvalidInputError(f"hop ({self.hop}) must be <= n_fft ({self.n_fft})")
        if self.window != "hann":
            raise InvalidInputError(f"Unsupported window '{self.window}'")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.hann_window(self.n_fft, periodic=True, dtype=dtype)

    def num_frames(self, num_samples: int) -> int:
        if self.center:
            return num_samples // self.hop + 1
        return (num_samples - self.n_fft) // self.hop + 1


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Magnitude (and optional phase) with shape [bins, frames]."""

    magnitude: np.ndarray
    phase: Optional[np.ndarray] = None
    config: StftConfig = field(default_factory=StftConfig)
    compression: str = "linear"
    num_samples: Optional[int] = None
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if mag.ndim != 2:
            raise ShapeError(f"magnitude must be 2-D, got shape {mag.shape}")
        if not np.all(np.isfinite(mag)) or np.any(mag < 0):
            raise InvalidInputError("magnitude entries must be finite and >= 0")
        if self.phase is not None and np.shape(self.phase) != mag.shape:
            raise ShapeError(
                f"phase shape {np.shape(self.phase)} != magnitude shape {mag.shape}"
            )
        if self.compression not in COMPRESSIONS:
            raise InvalidInputError(f"Unknown compression '{self.compression}'")
        object.__setattr__(self, "magnitude", mag)

    @property
    def n_bins(self) -> int:
        return self.magnitude.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]


@dataclass(frozen=True, eq=False)
class SpectrogramSegment:
    """A fixed-width slice of a (compressed) magnitude spectrogram.

    ``valid_frames`` counts the frames that come from the source; anything
    after them is zero padding.
    """

    data: np.ndarray
    utterance_id: str = ""
    frame_offset: int = 0
    valid_frames: int = SEGMENT_FRAMES

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] != SEGMENT_BINS:
            raise ShapeError(
                f"segment must have {SEGMENT_BINS} bins, got shape {data.shape}"
            )
        if self.frame_offset < 0:
            raise InvalidInputError("frame_offset must be >= 0")
        if not 0 <= self.valid_frames <= data.shape[1]:
            raise InvalidInputError(
                f"valid_frames={self.valid_frames} outside [0, {data.shape[1]}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def padded(self) -> bool:
        return self.valid_frames < self.width


@dataclass(frozen=True)
class CompressionStats:
    """Min/max of log1p(|S|) over a corpus; maps compressed values into [0, 1]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise InvalidInputError(f"Invalid compression range [{self.lo}, {self.hi}]")

    def as_dict(self):
        return {"lo": float(self.lo), "hi": float(self.hi)}

    @classmethod
    def from_dict(cls, d):
        return cls(lo=float(d["lo"]), hi=float(d["hi"]))


def stft(w: Waveform, cfg: Optional[StftConfig] = None) -> Spectrogram:
    """Short-time Fourier transform.

    Parameters
    ----------
    w : Waveform
        Non-empty input signal.
    cfg : StftConfig, optional
        Defaults to n_fft=256, hop=128, periodic Hann, centre padding.

    Returns
    -------
    Spectrogram
        Linear magnitude and phase, shape [n_fft // 2 + 1, frames].
    """
    cfg = cfg or StftConfig()
    if len(w) == 0:
        raise InvalidInputError("Cannot analyse an empty waveform")
    if not cfg.center and len(w) < cfg.n_fft:
        raise InvalidInputError(
            f"Waveform of {len(w)} samples is shorter than n_fft={cfg.n_fft}"
        )
    x = torch.from_numpy(w.samples)
    spec = torch.stft(
        x,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.n_fft,
        window=cfg.window_tensor(x.dtype),
        center=cfg.center,
        pad_mode="constant",
        return_complex=True,
    )
    spec = spec.numpy()
    return Spectrogram(
        magnitude=np.abs(spec),
        phase=np.angle(spec),
        config=cfg,
        compression="linear",
        num_samples=len(w),
        sample_rate=w.sample_rate,
    )


def istft(
    s: Spectrogram, cfg: Optional[StftConfig] = None, length: Optional[int] = None
) -> Waveform:
    """Overlap-add synthesis of a linear-magnitude spectrogram with phase."""
    cfg = cfg or s.config
    if s.phase is None:
        raise PhaseRequiredError("istft needs a phase matrix")
    if s.compression != "linear":
        raise InvalidInputError("istft needs a linear magnitude; decompress first")
    if s.n_bins != cfg.n_bins:
        raise ShapeError(f"{s.n_bins} bins do not match n_fft={cfg.n_fft}")
    length = length if length is not None else s.num_samples
    spec = torch.from_numpy(s.magnitude * np.exp(1j * np.asarray(s.phase)))
    x = torch.istft(
        spec,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.n_fft,
        window=cfg.window_tensor(torch.float64),
        center=cfg.center,
        length=length,
    )
    return Waveform(x.numpy(), s.sample_rate)


def fit_compression(spectrograms: Iterable[Spectrogram]) -> CompressionStats:
    """Corpus-level min/max of log1p magnitudes."""
    lo, hi = math.inf, -math.inf
    for s in spectrograms:
        if s.compression != "linear":
            raise InvalidInputError("fit_compression expects linear magnitudes")
        logmag = np.log1p(s.magnitude)
        lo = min(lo, float(logmag.min()))
        hi = max(hi, float(logmag.max()))
    if not math.isfinite(lo):
        raise InvalidInputError("fit_compression needs at least one spectrogram")
    if hi <= lo:
        logger.warning("Degenerate magnitude range [%s, %s]; widening to unit range", lo, hi)
        hi = lo + 1.0
    return CompressionStats(lo=lo, hi=hi)


def compress(s: Spectrogram, stats: CompressionStats) -> Spectrogram:
    if s.compression != "linear":
        raise InvalidInputError(f"Spectrogram is already '{s.compression}'")
    scaled = (np.log1p(s.magnitude) - stats.lo) / (stats.hi - stats.lo)
    return replace(s, magnitude=np.clip(scaled, 0.0, None), compression="log1p")


def decompress(s: Spectrogram, stats: CompressionStats) -> Spectrogram:
    if s.compression != "log1p":
        raise InvalidInputError(f"Spectrogram is '{s.compression}', not compressed")
    logmag = s.magnitude * (stats.hi - stats.lo) + stats.lo
    return replace(s, magnitude=np.clip(np.expm1(logmag), 0.0, None), compression="linear")


def segment(
    s: Spectrogram, width: int = SEGMENT_FRAMES, utterance_id: str = ""
) -> List[SpectrogramSegment]:
    """Cut a spectrogram into non-overlapping windows of ``width`` frames.

    The final partial window is zero padded; its ``valid_frames`` records how
    many frames are real.
    """
    if s.n_bins != SEGMENT_BINS:
        raise ShapeError(f"segment expects {SEGMENT_BINS} bins, got {s.n_bins}")
    segments = []
    for offset in range(0, s.n_frames, width):
        segments.append(crop_segment(s, offset, width=width, utterance_id=utterance_id))
    return segments


def crop_segment(
    s: Spectrogram, offset: int, width: int = SEGMENT_FRAMES, utterance_id: str = ""
) -> SpectrogramSegment:
    if s.n_bins != SEGMENT_BINS:
        raise ShapeError(f"crop_segment expects {SEGMENT_BINS} bins, got {s.n_bins}")
    if not 0 <= offset < max(s.n_frames, 1):
        raise InvalidInputError(f"offset {offset} outside spectrogram of {s.n_frames} frames")
    chunk = s.magnitude[:, offset : offset + width]
    valid = chunk.shape[1]
    if valid < width:
        chunk = np.pad(chunk, ((0, 0), (0, width - valid)))
    return SpectrogramSegment(
        data=chunk, utterance_id=utterance_id, frame_offset=offset, valid_frames=valid
    )


def reassemble(segments: Sequence[SpectrogramSegment]) -> np.ndarray:
    """Concatenate the valid frames of ``segments`` in frame order."""
    if not segments:
        return np.zeros((SEGMENT_BINS, 0))
    ordered = sorted(segments, key=lambda seg: seg.frame_offset)
    return np.concatenate([seg.data[:, : seg.valid_frames] for seg in ordered], axis=1)


def reconstruct_waveform(
    simulated_magnitude: Spectrogram,
    source_phase: Spectrogram,
    stats: Optional[CompressionStats] = None,
) -> Waveform:
    """Combine a simulated magnitude with the clean source phase and invert.

    Parameters
    ----------
    simulated_magnitude : Spectrogram
        Either linear, or ``log1p`` compressed (then ``stats`` is required).
    source_phase : Spectrogram
        The clean utterance's analysis; its phase and sample count are reused.
    stats : CompressionStats, optional
        Constants for undoing the compression.
    """
    if source_phase.phase is None:
        raise PhaseRequiredError("source spectrogram carries no phase")
    if simulated_magnitude.magnitude.shape != source_phase.phase.shape:
        raise ShapeError(
            f"simulated magnitude {simulated_magnitude.magnitude.shape} does not "
            f"match source phase {source_phase.phase.shape}"
        )
    mag = simulated_magnitude
    if mag.compression != "linear":
        if stats is None:
            raise InvalidInputError("compressed magnitude needs CompressionStats")
        mag = decompress(mag, stats)
    combined = Spectrogram(
        magnitude=mag.magnitude,
        phase=source_phase.phase,
        config=source_phase.config,
        num_samples=source_phase.num_samples,
        sample_rate=source_phase.sample_rate,
    )
    return istft(combined)


def estimate_snr(
    noisy: Waveform,
    clean: Optional[Waveform] = None,
    percentile: float = 20.0,
    cfg: Optional[StftConfig] = None,
) -> float:
    """SNR in dB of ``noisy`` with respect to ``clean``.

    Without a clean reference the noise power is tracked as a low percentile
    of the per-bin power over frames.

    Returns
    -------
    float
        ``math.inf`` when the residual is exactly zero.
    """
    if clean is None:
        return _blind_snr(noisy, percentile, cfg)
    if len(noisy) != len(clean):
        raise InvalidInputError(
            f"noisy ({len(noisy)}) and clean ({len(clean)}) lengths differ"
        )
    clean_energy = float(np.sum(clean.samples**2))
    if clean_energy == 0.0:
        raise InvalidInputError("clean reference has zero energy")
    residual_energy = float(np.sum((noisy.samples - clean.samples) ** 2))
    if residual_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(clean_energy / residual_energy)


def _blind_snr(noisy: Waveform, percentile: float, cfg: Optional[StftConfig]) -> float:
    if not 0.0 < percentile < 100.0:
        raise InvalidInputError(f"percentile must be in (0, 100), got {percentile}")
    cfg = replace(cfg or StftConfig(), center=False)
    power = stft(noisy, cfg).magnitude ** 2
    # a low quantile of an exponentially distributed periodogram bin is
    # -ln(1 - q) times its mean
    floor = np.percentile(power, percentile, axis=1) / -math.log(1.0 - percentile / 100.0)
    noise_power = float(floor.sum())
    total_power = float(power.mean(axis=1).sum())
    if noise_power == 0.0:
        return math.inf
    signal_power = max(total_power - noise_power, 1e-12 * noise_power)
    return 10.0 * math.log10(signal_power / noise_power)


def read_wav(path, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a 16-bit or float WAV file as a mono Waveform."""
    samples, sr = sf.read(str(path), dtype="float64", always_2d=False)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if sample_rate is not None and sr != sample_rate:
        raise InvalidInputError(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz")
    return Waveform(samples, sr)


def write_wav(path, w: Waveform, subtype: str = "PCM_16") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), w.normalized().samples, w.sample_rate, subtype=subtype, format="WAV")
