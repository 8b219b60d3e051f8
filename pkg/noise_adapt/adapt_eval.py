"""
Downstream adaptation and measurement.

Fine-tuning of an SE backend on simulated pairs, bucketed metric reports,
SNR histograms, embedding projections with silhouette scores, ablation runs
and the oracle (real-noise) pair builder.
"""
import dataclasses
import json
import logging
import math
import os
from collections import OrderedDict
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score
from tqdm import tqdm

from . import dsp
from .data import Manifest, segments_to_tensor
from .errors import ConfigurationError, InvalidInputError, SilhouetteUndefinedError
from .metrics import SI_SNR_CEILING, MetricRegistry
from .models import EncoderBackbone, NoiseEmbedding
from .se import SeBackend
from .simulate import PerturbationConfig, SimulatedPair, generate_dataset, write_pairs
from .train import GanBundle, GanTrainConfig

logger = logging.getLogger(__name__)

SNR_BUCKETS = (2.5, 7.5, 12.5, 17.5)
DEFAULT_HIST_EDGES = tuple(np.arange(-10.0, 32.5, 2.5))


def _pyplot():
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------------------
# SE fine-tuning
# ---------------------------------------------------------------------------


def finetune_se(
    backend: SeBackend,
    pairs: Sequence[SimulatedPair],
    epochs: int = 2,
    seed: int = 0,
    log_path=None,
    show_progress: bool = False,
) -> SeBackend:
    """Supervised fine-tuning on (simulated noisy, clean) pairs, batch size one.

    Runs exactly ``epochs * len(pairs)`` train steps, in a seeded order per
    epoch.
    """
    if not pairs:
        raise InvalidInputError("finetune_se needs at least one pair")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        losses = []
        for i in tqdm(order, desc=f"adapt {epoch}", leave=False, disable=not show_progress):
            pair = pairs[int(i)]
            noisy = dsp.read_wav(pair.simulated_waveform_path)
            clean = dsp.read_wav(pair.clean_waveform_path)
            loss = backend.train_step(noisy, clean)
            losses.append(loss)
            if log_path is not None:
                with open(log_path, "a") as f:
                    record = {"epoch": epoch, "step": step, "loss": loss, "clean_id": pair.clean_id}
                    f.write(json.dumps(record, sort_keys=True) + "\n")
            step += 1
        logger.info("SE epoch %d: mean loss %.4f", epoch, float(np.mean(losses)))
    return backend


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def nearest_bucket(snr_db: float, buckets: Sequence[float] = SNR_BUCKETS) -> float:
    """Closest bucket centre; ties go to the lower bucket."""
    buckets = sorted(buckets)
    return min(buckets, key=lambda b: (abs(snr_db - b), b))


@dataclasses.dataclass
class MetricReport:
    """Per-utterance scores and their means per SNR bucket.

    A metric whose provider is unavailable appears in ``missing`` and has
    ``None`` scores. SI-SNR values are capped at ``ceiling``.
    """

    metrics: List[str]
    buckets: List[float]
    per_utterance: Dict[str, Dict[str, Optional[float]]]
    bucket_of: Dict[str, float]
    missing: List[str] = dataclasses.field(default_factory=list)
    excluded: List[str] = dataclasses.field(default_factory=list)
    ceiling: float = SI_SNR_CEILING

    def _values(self, metric: str, ids: Sequence[str]) -> List[float]:
        vals = [self.per_utterance[u][metric] for u in ids]
        return [v for v in vals if v is not None]

    def bucket_means(self) -> Dict[float, Dict[str, Optional[float]]]:
        out = OrderedDict()
        for b in self.buckets:
            ids = [u for u, ub in self.bucket_of.items() if ub == b]
            out[b] = {}
            for m in self.metrics:
                vals = self._values(m, ids)
                out[b][m] = float(np.mean(vals)) if vals else None
        return out

    def aggregate(self) -> Dict[str, Optional[float]]:
        ids = sorted(self.per_utterance)
        out = {}
        for m in self.metrics:
            vals = self._values(m, ids)
            out[m] = float(np.mean(vals)) if vals else None
        return out

    def counts(self) -> Dict[float, int]:
        return {b: sum(1 for ub in self.bucket_of.values() if ub == b) for b in self.buckets}

    def to_table(self) -> str:
        """Tab-separated bucket table with an ``all`` row; absent values are ``NA``."""
        lines = ["\t".join(["bucket", "n"] + self.metrics)]
        def fmt(v):
            return "NA" if v is None else f"{v:.4f}"

        counts = self.counts()
        for b, means in self.bucket_means().items():
            lines.append("\t".join([f"{b:g}", str(counts[b])] + [fmt(means[m]) for m in self.metrics]))
        agg = self.aggregate()
        lines.append(
            "\t".join(["all", str(len(self.per_utterance))] + [fmt(agg[m]) for m in self.metrics])
        )
        return "\n".join(lines) + "\n"

    def write(self, out_prefix) -> None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(f"{out_prefix}.tsv", "w") as f:
            f.write(self.to_table())
        with open(f"{out_prefix}.jsonl", "w") as f:
            for uid in sorted(self.per_utterance):
                rec = {"utterance_id": uid, "bucket": self.bucket_of[uid]}
                rec.update(self.per_utterance[uid])
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _score_entry(entry, backend, names, registry, ceiling, buckets):
    if entry.reference_path is None:
        logger.warning("%s has no clean reference, skipped", entry.utterance_id)
        return entry.utterance_id, None
    noisy = dsp.read_wav(entry.audio_path)
    clean = dsp.read_wav(entry.reference_path)
    enhanced = backend.enhance(noisy)
    if len(enhanced) != len(clean):
        logger.warning(
            "%s: enhanced length %d != reference length %d, excluded",
            entry.utterance_id,
            len(enhanced),
            len(clean),
        )
        return entry.utterance_id, None
    snr = entry.snr_db
    if snr is None:
        snr = dsp.estimate_snr(noisy, clean)
    scores = {}
    for name in names:
        fn = registry.get(name)
        if fn is None:
            scores[name] = None
            continue
        value = float(fn(enhanced.samples, clean.samples, clean.sample_rate))
        if name == "si_snr":
            value = min(value, ceiling)
        scores[name] = value
    return entry.utterance_id, (nearest_bucket(snr, buckets), scores)


def evaluate(
    backend: SeBackend,
    test: Manifest,
    metrics: Sequence[str] = ("si_snr",),
    buckets: Sequence[float] = SNR_BUCKETS,
    registry: Optional[MetricRegistry] = None,
    ceiling: float = SI_SNR_CEILING,
    num_workers: int = 1,
    show_progress: bool = False,
) -> MetricReport:
    """Enhance every test utterance and score it against its clean reference.

    The bucket of an utterance is the nearest of ``buckets`` to its
    manifest SNR, or to the SNR measured against the reference when the
    manifest has none.
    """
    registry = registry or MetricRegistry.default()
    names = list(metrics)
    missing = [n for n in names if not registry.available(n)]
    entries = list(test)

    def job(entry):
        return _score_entry(entry, backend, names, registry, ceiling, buckets)

    if num_workers == 1 or num_workers is None:
        results = [job(e) for e in tqdm(entries, desc="evaluate", leave=False, disable=not show_progress)]
    else:
        if num_workers == 0:
            num_workers = os.cpu_count()
        with ThreadPool(num_workers) as p:
            results = list(
                tqdm(p.imap(job, entries), total=len(entries), desc="evaluate", leave=False, disable=not show_progress)
            )

    per_utterance, bucket_of, excluded = {}, {}, []
    for uid, result in sorted(results, key=lambda r: r[0]):
        if result is None:
            excluded.append(uid)
            continue
        bucket_of[uid], per_utterance[uid] = result
    return MetricReport(
        metrics=names,
        buckets=sorted(buckets),
        per_utterance=per_utterance,
        bucket_of=bucket_of,
        missing=missing,
        excluded=excluded,
        ceiling=ceiling,
    )


# ---------------------------------------------------------------------------
# analysis artefacts
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class SnrHistogram:
    edges: np.ndarray
    fractions: Dict[str, np.ndarray]

    def to_table(self) -> str:
        names = list(self.fractions)
        lines = ["\t".join(["lo", "hi"] + names)]
        for i in range(len(self.edges) - 1):
            row = [f"{self.edges[i]:g}", f"{self.edges[i + 1]:g}"]
            row += [f"{self.fractions[n][i]:.6f}" for n in names]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def plot(self, path) -> None:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(7, 4))
        centres = 0.5 * (self.edges[:-1] + self.edges[1:])
        width = np.diff(self.edges)
        for name, frac in self.fractions.items():
            ax.bar(centres, frac, width=width, alpha=0.5, label=name, align="center")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("fraction of utterances")
        ax.legend()
        fig.tight_layout()
        fig.savefig(str(path), format="svg")
        plt.close(fig)


def manifest_snrs(manifest: Manifest) -> List[float]:
    """Manifest SNRs, measured from audio (against the reference when present) where missing."""
    values = []
    for e in manifest:
        if e.snr_db is not None:
            values.append(float(e.snr_db))
            continue
        noisy = dsp.read_wav(e.audio_path)
        clean = dsp.read_wav(e.reference_path) if e.reference_path else None
        values.append(dsp.estimate_snr(noisy, clean))
    return values


def snr_histogram(
    manifests: Union[Mapping[str, Manifest], Sequence[Tuple[str, Manifest]]],
    bins: Sequence[float] = DEFAULT_HIST_EDGES,
    out_prefix=None,
) -> SnrHistogram:
    """Normalised SNR histogram per manifest; empty bins are kept as zeros.

    With ``out_prefix`` the table goes to ``<prefix>.tsv`` and the plot to
    ``<prefix>.svg``. Values outside the edges fall into the end bins.
    """
    items = manifests.items() if isinstance(manifests, Mapping) else manifests
    edges = np.asarray(bins, dtype=np.float64)
    fractions = OrderedDict()
    for name, manifest in items:
        snrs = np.array([s for s in manifest_snrs(manifest) if math.isfinite(s)])
        snrs = np.clip(snrs, edges[0], edges[-1])
        counts, _ = np.histogram(snrs, bins=edges)
        total = counts.sum()
        fractions[name] = counts / total if total else counts.astype(np.float64)
    hist = SnrHistogram(edges, fractions)
    if out_prefix is not None:
        Path(out_prefix).parent.mkdir(parents=True, exist_ok=True)
        with open(f"{out_prefix}.tsv", "w") as f:
            f.write(hist.to_table())
        hist.plot(f"{out_prefix}.svg")
    return hist


def _pca(x: np.ndarray, seed: int) -> np.ndarray:
    return PCA(n_components=2, random_state=seed).fit_transform(x)


def _tsne(x: np.ndarray, seed: int) -> np.ndarray:
    perplexity = min(30.0, max(1.0, (len(x) - 1) / 3.0))
    return TSNE(n_components=2, random_state=seed, perplexity=perplexity, init="pca").fit_transform(x)


PROJECTORS: Dict[str, Callable[[np.ndarray, int], np.ndarray]] = {"pca": _pca, "tsne": _tsne}


def register_projector(name: str, fn: Callable[[np.ndarray, int], np.ndarray]) -> None:
    PROJECTORS[name] = fn


@dataclasses.dataclass
class Projection:
    coords: np.ndarray
    labels: List[str]
    silhouette: float
    method: str

    def to_table(self) -> str:
        lines = ["x\ty\tlabel"]
        lines += [f"{x:.6f}\t{y:.6f}\t{lab}" for (x, y), lab in zip(self.coords, self.labels)]
        return "\n".join(lines) + "\n"

    def plot(self, path) -> None:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 6))
        for lab in sorted(set(self.labels)):
            idx = [i for i, v in enumerate(self.labels) if v == lab]
            ax.scatter(self.coords[idx, 0], self.coords[idx, 1], s=12, label=lab)
        ax.set_title(f"{self.method} (silhouette {self.silhouette:.3f})")
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(str(path), format="svg")
        plt.close(fig)


def utterance_embeddings(
    manifest: Manifest,
    backbone: EncoderBackbone,
    stats: dsp.CompressionStats,
    cfg: Optional[dsp.StftConfig] = None,
    show_progress: bool = False,
) -> List[NoiseEmbedding]:
    """One embedding per utterance: the mean over its segments."""
    backbone.eval()
    out = []
    for e in tqdm(manifest, desc="embed", leave=False, disable=not show_progress):
        spec = dsp.compress(dsp.stft(dsp.read_wav(e.audio_path), cfg), stats)
        with torch.no_grad():
            vecs = backbone.penultimate(segments_to_tensor(dsp.segment(spec, utterance_id=e.utterance_id)))
        out.append(NoiseEmbedding(vecs.mean(dim=0), e.utterance_id))
    return out


def embedding_projection(
    embeddings: Sequence[Union[NoiseEmbedding, np.ndarray, torch.Tensor]],
    labels: Sequence[str],
    method: str = "pca",
    seed: int = 0,
    out_prefix=None,
) -> Projection:
    """2-D projection of embeddings plus their silhouette score over ``labels``.

    The silhouette is computed in the original embedding space.
    """
    if method not in PROJECTORS:
        raise ConfigurationError(f"Unknown projector '{method}'; known: {sorted(PROJECTORS)}")
    rows = []
    for e in embeddings:
        v = e.vector if isinstance(e, NoiseEmbedding) else e
        rows.append(v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v))
    x = np.stack(rows).astype(np.float64)
    labels = [str(lab) for lab in labels]
    if len(labels) != len(x):
        raise InvalidInputError(f"{len(x)} embeddings but {len(labels)} labels")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 3:
        raise InvalidInputError("Need at least 2 classes with at least 3 embeddings each")
    if np.all(np.ptp(x, axis=0) == 0):
        raise SilhouetteUndefinedError("All embeddings are identical")
    score = float(silhouette_score(x, labels))
    proj = Projection(PROJECTORS[method](x, seed), labels, score, method)
    if out_prefix is not None:
        Path(out_prefix).parent.mkdir(parents=True, exist_ok=True)
        with open(f"{out_prefix}.tsv", "w") as f:
            f.write(proj.to_table())
        proj.plot(f"{out_prefix}.svg")
    return proj


def spectral_profile(
    items: Sequence[Union[dsp.Waveform, dsp.Spectrogram]], cfg: Optional[dsp.StftConfig] = None
) -> np.ndarray:
    """Mean per-bin log magnitude over all frames of ``items``."""
    frames = []
    for it in items:
        spec = dsp.stft(it, cfg) if isinstance(it, dsp.Waveform) else it
        frames.append(np.log(spec.magnitude + 1e-8))
    return np.concatenate(frames, axis=1).mean(axis=1)


def spectral_profile_distance(a, b, cfg: Optional[dsp.StftConfig] = None) -> float:
    """L2 distance between the spectral profiles of two collections."""
    return float(np.linalg.norm(spectral_profile(a, cfg) - spectral_profile(b, cfg)))


# ---------------------------------------------------------------------------
# oracle pairs
# ---------------------------------------------------------------------------


def mix_at_snr(
    clean: dsp.Waveform, noise: dsp.Waveform, snr_db: float, rng: Optional[np.random.Generator] = None
) -> dsp.Waveform:
    """``clean`` plus a clean-length excerpt of ``noise`` scaled to ``snr_db``.

    Shorter noise is tiled; the excerpt offset is random when ``rng`` is given.
    """
    c = clean.samples
    n = noise.samples
    if len(n) == 0 or not np.any(n):
        raise InvalidInputError("Noise signal has zero energy")
    if len(n) < len(c):
        n = np.tile(n, -(-len(c) // len(n)))
    offset = int(rng.integers(0, len(n) - len(c) + 1)) if rng is not None else 0
    n = n[offset : offset + len(c)]
    n_energy = np.dot(n, n)
    if n_energy == 0:
        raise InvalidInputError("Noise excerpt has zero energy")
    scale = math.sqrt(np.dot(c, c) / (n_energy * 10 ** (snr_db / 10.0)))
    return dsp.Waveform(c + scale * n, clean.sample_rate)


def build_oracle_pairs(
    clean_manifest: Manifest,
    noise_manifest: Manifest,
    snrs: Sequence[float],
    out_dir,
    seed: int = 0,
) -> List[SimulatedPair]:
    """Mix every clean utterance with a random real target noise at a random SNR from ``snrs``."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    noise_ids = noise_manifest.ids
    noises = {}
    pairs = []
    for e in clean_manifest:
        nid = noise_ids[int(rng.integers(len(noise_ids)))]
        snr = float(snrs[int(rng.integers(len(snrs)))])
        if nid not in noises:
            noises[nid] = dsp.read_wav(noise_manifest.get(nid).audio_path)
        mixed = mix_at_snr(dsp.read_wav(e.audio_path), noises[nid], snr, rng)
        dest = out_dir / "audio" / f"{e.utterance_id}.wav"
        dsp.write_wav(dest, mixed)
        pairs.append(SimulatedPair(e.utterance_id, nid, 0.0, str(dest), str(e.audio_path)))
    write_pairs(pairs, out_dir / "pairs.jsonl")
    return pairs


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = OrderedDict(
    [
        ("full", {}),
        ("no_nse", {"lambda_nse": 0.0}),
        ("no_embeddings", {"use_embeddings": False}),
    ]
)


def ablation_config(config_name: str, base: Optional[GanTrainConfig] = None) -> GanTrainConfig:
    """Training configuration of an ablation derived from ``base``."""
    if config_name not in ABLATIONS:
        raise ConfigurationError(f"Unknown ablation '{config_name}'; known: {list(ABLATIONS)}")
    base = base or GanTrainConfig()
    return dataclasses.replace(base, **ABLATIONS[config_name])


def _check_bundle(config_name: str, bundle: GanBundle) -> None:
    cfg = bundle.train_cfg
    expected = {
        "full": cfg.use_embeddings and cfg.lambda_nse > 0,
        "no_nse": cfg.use_embeddings and cfg.lambda_nse == 0,
        "no_embeddings": not cfg.use_embeddings,
    }[config_name]
    if not expected:
        raise ConfigurationError(
            f"Bundle trained with lambda_nse={cfg.lambda_nse}, use_embeddings={cfg.use_embeddings} "
            f"does not match the '{config_name}' ablation"
        )


def run_ablation(
    config_name: str,
    bundle: GanBundle,
    clean_manifest: Manifest,
    target_subset: Manifest,
    test: Manifest,
    backend: SeBackend,
    out_dir,
    perturbation: Optional[PerturbationConfig] = None,
    epochs: int = 2,
    metrics: Sequence[str] = ("si_snr",),
    registry: Optional[MetricRegistry] = None,
    force: bool = False,
    show_progress: bool = False,
) -> MetricReport:
    """Simulate with an ablation's bundle, adapt ``backend`` and evaluate it.

    The downstream pipeline is identical for every configuration.
    """
    if config_name not in ABLATIONS:
        raise ConfigurationError(f"Unknown ablation '{config_name}'; known: {list(ABLATIONS)}")
    _check_bundle(config_name, bundle)
    out_dir = Path(out_dir) / config_name
    pairs = generate_dataset(
        clean_manifest,
        target_subset,
        bundle,
        perturbation,
        out_dir / "simulated",
        force=force,
        show_progress=show_progress,
    )
    finetune_se(backend, pairs, epochs=epochs, log_path=out_dir / "se_log.jsonl", show_progress=show_progress)
    report = evaluate(backend, test, metrics, registry=registry, show_progress=show_progress)
    report.write(out_dir / "report")
    return report
