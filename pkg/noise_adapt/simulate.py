"""
Domain conversion with a trained bundle.

A clean utterance is translated segment by segment, conditioned on the
embeddings of a target noisy utterance shifted by a Gaussian perturbation
drawn once per utterance, and resynthesised with the clean phase.
"""
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from tqdm import tqdm

from . import dsp
from .data import Manifest, segments_to_tensor
from .errors import InvalidInputError, OutputCollisionError
from .models import NoiseEmbedding
from .train import GanBundle

logger = logging.getLogger(__name__)

RUN_FILE = "run.yaml"
PAIRS_FILE = "pairs.jsonl"


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidInputError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SimulatedPair:
    clean_id: str
    target_noise_id: str
    sigma_used: float
    simulated_waveform_path: str
    clean_waveform_path: str

    def to_record(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Dict) -> "SimulatedPair":
        return cls(**rec)


def draw_perturbation(dim: int, cfg: PerturbationConfig, rng=None) -> np.ndarray:
    """Gaussian offset with per-coordinate std ``cfg.sigma`` (exact zeros for sigma 0)."""
    if cfg.sigma == 0:
        return np.zeros(dim)
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    return cfg.sigma * rng.standard_normal(dim)


def perturb_embedding(
    n: NoiseEmbedding, cfg: PerturbationConfig, rng: Optional[np.random.Generator] = None
) -> NoiseEmbedding:
    """``n + eps`` with ``eps ~ N(0, sigma^2 I)``; ``rng`` defaults to one seeded by ``cfg.rng_seed``."""
    if cfg.sigma == 0:
        return NoiseEmbedding(n.vector.clone(), n.source_utterance_id)
    eps = torch.from_numpy(draw_perturbation(n.dim, cfg, rng)).to(n.vector.dtype)
    return NoiseEmbedding(n.vector + eps, n.source_utterance_id)


def target_embeddings(target: dsp.Waveform, bundle: GanBundle, target_id: str = "") -> List[NoiseEmbedding]:
    """One embedding per segment of the target utterance."""
    spec = dsp.compress(dsp.stft(target, bundle.stft_cfg), bundle.stats)
    segments = dsp.segment(spec, utterance_id=target_id)
    bundle.encoder.eval()
    with torch.no_grad():
        vecs = bundle.encoder.penultimate(segments_to_tensor(segments))
    return [NoiseEmbedding(v, target_id) for v in vecs]


def simulate_spectrogram(
    clean: dsp.Waveform,
    embeddings: Sequence[NoiseEmbedding],
    bundle: GanBundle,
    cfg: PerturbationConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[dsp.Spectrogram, dsp.Spectrogram, float]:
    """Simulated compressed magnitude, the clean analysis and the clamp rate."""
    clean_spec = dsp.stft(clean, bundle.stft_cfg)
    segments = dsp.segment(dsp.compress(clean_spec, bundle.stats))
    if bundle.train_cfg.use_embeddings:
        eps = torch.from_numpy(draw_perturbation(bundle.embed_dim, cfg, rng)).float()
        n = torch.stack([embeddings[i % len(embeddings)].vector for i in range(len(segments))])
        n = n.float() + eps
    else:
        n = torch.zeros(len(segments), bundle.embed_dim)
    bundle.generator.eval()
    with torch.no_grad():
        out = bundle.generator(segments_to_tensor(segments), n).numpy()[:, 0]
    valid = np.concatenate([out[i][:, : s.valid_frames] for i, s in enumerate(segments)], axis=1)
    clamp_rate = float(np.mean((valid < 0) | (valid > 1)))
    out = np.clip(out, 0.0, 1.0)
    simulated = [
        dsp.SpectrogramSegment(o, s.utterance_id, s.frame_offset, s.valid_frames)
        for o, s in zip(out, segments)
    ]
    magnitude = dsp.Spectrogram(
        magnitude=dsp.reassemble(simulated),
        config=clean_spec.config,
        compression="log1p",
        num_samples=clean_spec.num_samples,
        sample_rate=clean_spec.sample_rate,
    )
    return magnitude, clean_spec, clamp_rate


def simulate_utterance(
    clean: dsp.Waveform,
    target: dsp.Waveform,
    bundle: GanBundle,
    cfg: Optional[PerturbationConfig] = None,
    target_id: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
) -> dsp.Waveform:
    """Translate ``clean`` into the noise condition of ``target``.

    The output has exactly the clean utterance's length.
    """
    cfg = cfg or PerturbationConfig()
    if target_id is not None and bundle.target_ids and target_id not in bundle.target_ids:
        logger.warning("Target %s was not among the training targets of this bundle", target_id)
    embeddings = target_embeddings(target, bundle, target_id or "")
    magnitude, clean_spec, clamp_rate = simulate_spectrogram(clean, embeddings, bundle, cfg, rng)
    logger.debug("Clamped %.4f%% of bins", 100 * clamp_rate)
    return dsp.reconstruct_waveform(magnitude, clean_spec, bundle.stats)


def _run_params(clean_manifest: Manifest, target_subset: Manifest, bundle: GanBundle, cfg):
    ids = "\n".join(clean_manifest.ids).encode("utf-8")
    return {
        "sigma": float(cfg.sigma),
        "seed": int(cfg.rng_seed),
        "clean_ids_md5": hashlib.md5(ids).hexdigest(),
        "num_clean": len(clean_manifest),
        "target_ids": list(target_subset.ids),
        "bundle_step": int(bundle.step),
        "bundle_md5": bundle.digest(),
    }


def _prepare_out_dir(out_dir: Path, params: Dict, force: bool) -> bool:
    """Returns whether existing outputs may be reused."""
    run_file = out_dir / RUN_FILE
    if out_dir.exists() and any(out_dir.iterdir()):
        previous = None
        if run_file.exists():
            with open(run_file) as f:
                previous = yaml.safe_load(f)
        if previous == params:
            logger.info("Resuming simulation in %s", out_dir)
            return True
        if not force:
            raise OutputCollisionError(
                f"{out_dir} already holds other outputs; pass force to overwrite"
            )
        logger.warning("Overwriting outputs in %s", out_dir)
        shutil.rmtree(out_dir / "audio", ignore_errors=True)
        for name in (PAIRS_FILE, RUN_FILE):
            if (out_dir / name).exists():
                os.remove(out_dir / name)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    with open(run_file, "w") as f:
        yaml.safe_dump(params, f, sort_keys=True)
    return False


def assign_targets(clean_ids: Sequence[str], target_ids: Sequence[str], seed: int) -> List[str]:
    """Uniform target choice per clean utterance, reproducible from ``seed``."""
    if not target_ids:
        raise InvalidInputError("No target utterances to choose from")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(target_ids), size=len(clean_ids))
    return [target_ids[i] for i in picks]


def write_pairs(pairs: Sequence[SimulatedPair], path) -> None:
    tmp = f"{path}.partial"
    with open(tmp, "w") as f:
        for p in pairs:
            f.write(json.dumps(p.to_record(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_pairs(path) -> List[SimulatedPair]:
    with open(path) as f:
        return [SimulatedPair.from_record(json.loads(line)) for line in f if line.strip()]


def generate_dataset(
    clean_manifest: Manifest,
    target_subset: Manifest,
    bundle: GanBundle,
    cfg: Optional[PerturbationConfig] = None,
    out_dir="simulated",
    force: bool = False,
    num_workers: int = 1,
    show_progress: bool = False,
) -> List[SimulatedPair]:
    """Simulate one noisy counterpart per clean utterance.

    Writes ``audio/<clean_id>.wav``, ``pairs.jsonl`` (ordered by clean id)
    and ``run.yaml`` under ``out_dir``. A rerun with the same parameters
    skips files that already exist.

    Parameters
    ----------
    num_workers : int
        Threads used for simulation. ``0`` means one per core.
    """
    cfg = cfg or PerturbationConfig()
    out_dir = Path(out_dir)
    params = _run_params(clean_manifest, target_subset, bundle, cfg)
    reuse = _prepare_out_dir(out_dir, params, force)

    clean_ids = clean_manifest.ids
    assignment = assign_targets(clean_ids, target_subset.ids, cfg.rng_seed)
    outside = set(assignment) - set(bundle.target_ids) if bundle.target_ids else set()
    for tid in sorted(outside):
        logger.warning("Target %s was not among the training targets of this bundle", tid)
    embeddings = {
        tid: target_embeddings(dsp.read_wav(target_subset.get(tid).audio_path), bundle, tid)
        for tid in sorted(set(assignment))
    }

    def job(idx: int) -> Tuple[SimulatedPair, Optional[float]]:
        entry = clean_manifest.get(clean_ids[idx])
        dest = out_dir / "audio" / f"{entry.utterance_id}.wav"
        pair = SimulatedPair(
            clean_id=entry.utterance_id,
            target_noise_id=assignment[idx],
            sigma_used=float(cfg.sigma),
            simulated_waveform_path=str(dest),
            clean_waveform_path=str(entry.audio_path),
        )
        if reuse and dest.exists():
            return pair, None
        rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, idx]))
        clean = dsp.read_wav(entry.audio_path)
        magnitude, clean_spec, clamp_rate = simulate_spectrogram(
            clean, embeddings[assignment[idx]], bundle, cfg, rng
        )
        wav = dsp.reconstruct_waveform(magnitude, clean_spec, bundle.stats)
        tmp = dest.with_name(f".{dest.stem}.partial.wav")
        dsp.write_wav(tmp, wav)
        os.replace(tmp, dest)
        return pair, clamp_rate

    indices = range(len(clean_ids))
    if num_workers == 1 or num_workers is None:
        results = [
            job(i)
            for i in tqdm(indices, desc="simulate", leave=False, disable=not show_progress)
        ]
    else:
        if num_workers == 0:
            num_workers = os.cpu_count()
        logger.info("Will use %d threads for simulation", num_workers)
        with ThreadPool(num_workers) as p:
            results = list(
                tqdm(
                    p.imap(job, indices),
                    total=len(clean_ids),
                    desc="simulate",
                    leave=False,
                    disable=not show_progress,
                )
            )

    pairs = sorted((pair for pair, _ in results), key=lambda p: p.clean_id)
    rates = [r for _, r in results if r is not None]
    if rates:
        logger.info("Simulated %d utterances, mean clamp rate %.4f%%", len(rates), 100 * np.mean(rates))
    write_pairs(pairs, out_dir / PAIRS_FILE)
    return pairs


def sigma_sweep(
    clean_manifest: Manifest,
    target_subset: Manifest,
    bundle: GanBundle,
    sigmas: Sequence[float],
    out_dir,
    seed: int = 0,
    **kwargs,
) -> Dict[float, List[SimulatedPair]]:
    """``generate_dataset`` once per sigma into ``out_dir/sigma_<value>``."""
    results = {}
    for sigma in sigmas:
        sub = Path(out_dir) / f"sigma_{sigma:g}"
        results[sigma] = generate_dataset(
            clean_manifest, target_subset, bundle, PerturbationConfig(sigma, seed), sub, **kwargs
        )
    return results
