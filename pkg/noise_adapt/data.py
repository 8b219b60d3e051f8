"""
Corpus ingestion, manifests and the unpaired sampling protocol.

A manifest is an immutable, id-sorted list of utterance records persisted as
JSON lines. Training draws unpaired clean/noisy segments from two pools whose
order is a pure function of (pool, seed, epoch).
"""
import json
import logging
import re
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
import torch
from tqdm import tqdm

from . import dsp
from .errors import (
    ConfigurationError,
    DuplicateIdError,
    EmptyCorpusError,
    InsufficientUtterancesError,
    InvalidInputError,
)

logger = logging.getLogger(__name__)

# <id>__<noise type>[__<snr>dB].wav
NAMING_PATTERN = r"__(?P<noise>[A-Za-z0-9-]+)(?:__(?P<snr>-?\d+(?:\.\d+)?)dB)?$"


class Domain(str, Enum):
    SOURCE_CLEAN = "source_clean"
    TARGET_NOISY = "target_noisy"


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    domain: Domain
    noise_type: Optional[str] = None
    snr_db: Optional[float] = None
    reference_path: Optional[str] = None

    def to_record(self) -> Dict:
        rec = asdict(self)
        rec["domain"] = self.domain.value
        return rec

    @classmethod
    def from_record(cls, rec: Dict) -> "ManifestEntry":
        rec = dict(rec)
        rec["domain"] = Domain(rec["domain"])
        if rec.get("snr_db") is not None:
            rec["snr_db"] = float(rec["snr_db"])
        return cls(**rec)


class Manifest:
    """Immutable collection of utterance records, ordered by id."""

    def __init__(self, entries: Sequence[ManifestEntry] = ()):
        seen = set()
        for e in entries:
            if e.utterance_id in seen:
                raise DuplicateIdError(f"Duplicate utterance id: {e.utterance_id}")
            seen.add(e.utterance_id)
        self._entries = tuple(sorted(entries, key=lambda e: e.utterance_id))
        self._by_id = {e.utterance_id: e for e in self._entries}

    def __len__(self):
        return len(self._entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self._entries)

    def __contains__(self, utterance_id):
        return utterance_id in self._by_id

    def __eq__(self, other):
        return isinstance(other, Manifest) and self._entries == other._entries

    def __repr__(self):
        return f"Manifest({len(self)} entries)"

    @property
    def entries(self) -> Tuple[ManifestEntry, ...]:
        return self._entries

    @property
    def ids(self) -> List[str]:
        return [e.utterance_id for e in self._entries]

    def get(self, utterance_id: str) -> ManifestEntry:
        return self._by_id[utterance_id]

    def by_noise_type(self) -> Dict[Optional[str], List[ManifestEntry]]:
        groups: Dict[Optional[str], List[ManifestEntry]] = {}
        for e in self._entries:
            groups.setdefault(e.noise_type, []).append(e)
        return groups

    @property
    def noise_types(self) -> List[str]:
        return sorted(t for t in self.by_noise_type() if t is not None)

    def write(self, path) -> None:
        with open(path, "w") as fo:
            for e in self._entries:
                fo.write(json.dumps(e.to_record(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path, check_files: bool = False) -> "Manifest":
        entries = []
        with open(path) as fi:
            for line in fi:
                if line.strip():
                    entries.append(ManifestEntry.from_record(json.loads(line)))
        manifest = cls(entries)
        if check_files:
            manifest.check_files()
        return manifest

    def check_files(self) -> None:
        """Make sure every referenced file exists and decodes."""
        for e in self._entries:
            for path in (e.audio_path, e.reference_path):
                if path is None:
                    continue
                if not Path(path).is_file():
                    raise FileNotFoundError(f"{e.utterance_id}: missing file {path}")
                sf.info(str(path))


@dataclass(frozen=True)
class DomainRules:
    """How to label the files found by ``build_manifest``.

    ``pattern`` is matched against the file stem and may define the named
    groups ``noise`` and ``snr``. A ``label_file`` holds whitespace separated
    ``<id> <noise_type> [<snr_db>]`` lines and wins over the pattern.
    ``reference_dir`` pairs each file with a clean reference of the same name.
    """

    domain: Domain = Domain.TARGET_NOISY
    pattern: Optional[str] = NAMING_PATTERN
    label_file: Optional[str] = None
    reference_dir: Optional[str] = None


def _read_label_file(path) -> Dict[str, Tuple[Optional[str], Optional[float]]]:
    labels = {}
    with open(path) as fi:
        for line in fi:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            noise = parts[1] if len(parts) > 1 else None
            snr = float(parts[2]) if len(parts) > 2 else None
            labels[parts[0]] = (noise, snr)
    return labels


def build_manifest(root_dir, domain_rules: Optional[DomainRules] = None) -> Manifest:
    """Scan ``root_dir`` recursively for WAV files.

    Parameters
    ----------
    root_dir : str or Path
        Directory holding the corpus.
    domain_rules : DomainRules, optional
        Domain label and noise-type/SNR parsing rules.

    Returns
    -------
    Manifest
        One entry per decodable file, sorted by id (the file stem). Files
        that fail to decode are logged and skipped.
    """
    rules = domain_rules or DomainRules()
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"No such directory: {root}")
    labels = _read_label_file(rules.label_file) if rules.label_file else {}
    regex = re.compile(rules.pattern) if rules.pattern else None

    entries = []
    seen: Dict[str, Path] = {}
    for path in sorted(root.rglob("*.wav")):
        uid = path.stem
        if uid in seen:
            raise DuplicateIdError(f"Duplicate utterance id '{uid}': {seen[uid]} and {path}")
        seen[uid] = path
        try:
            sf.info(str(path))
        except (RuntimeError, OSError) as ex:
            logger.warning("Skipping unreadable file %s: %s", path, ex)
            continue

        noise_type, snr_db = labels.get(uid, (None, None))
        if uid not in labels and regex is not None:
            m = regex.search(uid)
            if m:
                noise_type = m.groupdict().get("noise")
                snr = m.groupdict().get("snr")
                snr_db = float(snr) if snr is not None else None

        reference = None
        if rules.reference_dir:
            candidate = Path(rules.reference_dir) / path.name
            if candidate.is_file():
                reference = str(candidate)
            else:
                logger.warning("No clean reference for %s in %s", uid, rules.reference_dir)

        entries.append(
            ManifestEntry(
                utterance_id=uid,
                audio_path=str(path),
                domain=rules.domain,
                noise_type=noise_type,
                snr_db=snr_db,
                reference_path=reference,
            )
        )
    if not entries:
        raise EmptyCorpusError(f"No usable WAV files under {root}")
    logger.info("Built manifest of %d entries from %s", len(entries), root)
    return Manifest(entries)


def sample_training_subset(
    source: Manifest,
    target: Manifest,
    n: int = 40,
    per_noise_type: Optional[int] = None,
    seed: int = 0,
) -> Tuple[Manifest, Manifest]:
    """Draw the unpaired training subsets.

    ``n`` clean utterances are drawn uniformly from ``source``. The target
    subset is either ``n`` uniform draws or, with ``per_noise_type``, exactly
    that many utterances of every noise type.
    """
    rng = np.random.default_rng(seed)
    if len(source) < n:
        raise InsufficientUtterancesError(
            f"Source corpus has {len(source)} utterances, need {n}"
        )
    src_idx = rng.choice(len(source), size=n, replace=False)
    src = Manifest([source.entries[i] for i in src_idx])

    if per_noise_type is None:
        if len(target) < n:
            raise InsufficientUtterancesError(
                f"Target corpus has {len(target)} utterances, need {n}"
            )
        tgt_idx = rng.choice(len(target), size=n, replace=False)
        return src, Manifest([target.entries[i] for i in tgt_idx])

    groups = target.by_noise_type()
    if None in groups:
        raise ConfigurationError(
            f"{len(groups[None])} target utterances have no noise-type label; "
            "stratified sampling needs labels"
        )
    picked: List[ManifestEntry] = []
    for noise_type in sorted(groups):
        members = groups[noise_type]
        if len(members) < per_noise_type:
            raise InsufficientUtterancesError(
                f"Noise type '{noise_type}' has {len(members)} utterances, "
                f"need {per_noise_type}",
                noise_type=noise_type,
            )
        idx = rng.choice(len(members), size=per_noise_type, replace=False)
        picked.extend(members[i] for i in idx)
    if len(picked) != n:
        logger.warning(
            "Stratified sampling gives %d target utterances (%d types x %d), not n=%d",
            len(picked),
            len(groups),
            per_noise_type,
            n,
        )
    return src, Manifest(picked)


def exclude_from_test(test: Manifest, used: Manifest) -> Manifest:
    used_ids = set(used.ids)
    return Manifest([e for e in test if e.utterance_id not in used_ids])


class SegmentPool:
    """Compressed spectrograms of one domain, addressable by position."""

    def __init__(self, items: Sequence[Tuple[str, dsp.Spectrogram]]):
        if not items:
            raise InvalidInputError("A segment pool needs at least one utterance")
        for uid, spec in items:
            if spec.compression != "log1p":
                raise InvalidInputError(f"Pool spectrogram for {uid} is not compressed")
        self.utterance_ids = [uid for uid, _ in items]
        self.spectrograms = [spec for _, spec in items]

    def __len__(self):
        return len(self.utterance_ids)

    def crop(self, index: int, u: float, width: int = dsp.SEGMENT_FRAMES):
        """Segment of utterance ``index`` at relative offset ``u`` in [0, 1)."""
        spec = self.spectrograms[index]
        max_offset = max(spec.n_frames - width, 0)
        offset = int(np.floor(u * (max_offset + 1)))
        return dsp.crop_segment(spec, offset, width, utterance_id=self.utterance_ids[index])


def load_spectrograms(
    manifest: Manifest,
    cfg: Optional[dsp.StftConfig] = None,
    show_progress: bool = False,
) -> Dict[str, dsp.Spectrogram]:
    """Linear spectrograms of every utterance in ``manifest``."""
    specs = {}
    for e in tqdm(manifest, desc="analyse", leave=False, disable=not show_progress):
        specs[e.utterance_id] = dsp.stft(dsp.read_wav(e.audio_path), cfg)
    return specs


def build_pool(
    manifest: Manifest,
    stats: dsp.CompressionStats,
    cfg: Optional[dsp.StftConfig] = None,
    show_progress: bool = False,
) -> SegmentPool:
    specs = load_spectrograms(manifest, cfg, show_progress=show_progress)
    return SegmentPool([(uid, dsp.compress(s, stats)) for uid, s in specs.items()])


@dataclass(frozen=True, eq=False)
class UnpairedBatch:
    clean: List[dsp.SpectrogramSegment]
    noisy: List[dsp.SpectrogramSegment]
    noisy_utterance_ids: List[str]

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise InvalidInputError(
                f"Batch has {len(self.clean)} clean and {len(self.noisy)} noisy segments"
            )
        shared = {s.utterance_id for s in self.clean} & set(self.noisy_utterance_ids)
        if shared:
            raise InvalidInputError(f"Clean and noisy segments share ids: {sorted(shared)}")

    def __len__(self):
        return len(self.clean)

    def tensors(self, device="cpu") -> Tuple[torch.Tensor, torch.Tensor]:
        return segments_to_tensor(self.clean, device), segments_to_tensor(self.noisy, device)


def segments_to_tensor(segments: Sequence[dsp.SpectrogramSegment], device="cpu") -> torch.Tensor:
    """Stack segments into a [B, 1, bins, frames] float tensor."""
    arr = np.stack([s.data for s in segments])[:, None]
    return torch.from_numpy(arr).to(device)


def _epoch_plan(n_clean, n_noisy, batch_size, seed, epoch):
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    num_batches = n_noisy // batch_size
    if num_batches == 0:
        raise InvalidInputError(
            f"Noisy pool of {n_noisy} utterances cannot fill a batch of {batch_size}"
        )
    needed = num_batches * batch_size
    rng = np.random.default_rng([seed, epoch])
    noisy_order = rng.permutation(n_noisy)[:needed]
    clean_order = np.concatenate(
        [rng.permutation(n_clean) for _ in range(-(-needed // n_clean))]
    )[:needed]
    clean_u = rng.random(needed)
    noisy_u = rng.random(needed)
    return num_batches, clean_order, noisy_order, clean_u, noisy_u


def steps_per_epoch(noisy_pool: SegmentPool, batch_size: int = 1) -> int:
    return len(noisy_pool) // batch_size


def iter_epoch(
    clean_pool: SegmentPool,
    noisy_pool: SegmentPool,
    batch_size: int = 1,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[UnpairedBatch]:
    """All batches of one epoch, in their seeded order."""
    num_batches, c_order, n_order, c_u, n_u = _epoch_plan(
        len(clean_pool), len(noisy_pool), batch_size, seed, epoch
    )
    for b in range(num_batches):
        yield _make_batch(clean_pool, noisy_pool, b, batch_size, c_order, n_order, c_u, n_u)


def next_batch(
    clean_pool: SegmentPool,
    noisy_pool: SegmentPool,
    batch_size: int = 1,
    seed: int = 0,
    epoch: int = 0,
    index: int = 0,
) -> UnpairedBatch:
    """The ``index``-th batch of ``epoch``; identical to the one ``iter_epoch`` yields."""
    num_batches, c_order, n_order, c_u, n_u = _epoch_plan(
        len(clean_pool), len(noisy_pool), batch_size, seed, epoch
    )
    if not 0 <= index < num_batches:
        raise InvalidInputError(f"Batch index {index} outside epoch of {num_batches}")
    return _make_batch(clean_pool, noisy_pool, index, batch_size, c_order, n_order, c_u, n_u)


def _make_batch(clean_pool, noisy_pool, b, batch_size, c_order, n_order, c_u, n_u):
    sl = slice(b * batch_size, (b + 1) * batch_size)
    clean = [clean_pool.crop(int(i), float(u)) for i, u in zip(c_order[sl], c_u[sl])]
    noisy = [noisy_pool.crop(int(i), float(u)) for i, u in zip(n_order[sl], n_u[sl])]
    return UnpairedBatch(
        clean=clean, noisy=noisy, noisy_utterance_ids=[s.utterance_id for s in noisy]
    )
