"""
Training procedures.

* ``finetune_encoder``: two-stage classification fine-tuning of the noise
  encoder (noise types first, then one class per target utterance).
* ``train_gan``: adversarial training of the conditioned generator against
  the patch discriminator with the composite objective.
* ``save_bundle`` / ``load_bundle`` and ``save_encoder`` / ``load_encoder``:
  single-file checkpoints with md5-validated members.
"""
import hashlib
import io
import json
import logging
import os
import tarfile
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from tqdm import tqdm

from . import dsp
from .data import (
    Manifest,
    SegmentPool,
    UnpairedBatch,
    load_spectrograms,
    next_batch,
    steps_per_epoch,
)
from .errors import (
    BundleCorruptError,
    BundleVersionError,
    ConfigurationError,
    InvalidInputError,
    TrainingDivergenceError,
)
from .losses import PatchProjector, PclConfig, adv_loss, nse_loss, pcl_loss, total_loss
from .models import (
    DiscriminatorSpec,
    EncoderBackbone,
    FilmResnetGenerator,
    GeneratorSpec,
    PatchDiscriminator,
    build_backbone,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER = "header.yaml"


@dataclass(frozen=True)
class EncoderStageConfig:
    enabled: bool = True
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("encoder stage needs epochs >= 1, lr > 0, batch_size >= 1")


@dataclass(frozen=True)
class EncoderFinetuneConfig:
    """Noise-type stage (``stage1``) always runs before the per-utterance stage (``stage2``)."""

    stage1: EncoderStageConfig = field(default_factory=EncoderStageConfig)
    stage2: EncoderStageConfig = field(default_factory=EncoderStageConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for stage in ("stage1", "stage2"):
            if isinstance(d.get(stage), dict):
                d[stage] = EncoderStageConfig(**d[stage])
        return cls(**d)


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 400
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    lambda_nse: float = 10.0
    seed: int = 0
    adv_form: str = "nonsaturating"
    pcl: PclConfig = field(default_factory=PclConfig)
    checkpoint_every: int = 50
    use_embeddings: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lambda_nse < 0:
            raise ConfigurationError("lambda_nse must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    def as_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("pcl"), dict):
            d["pcl"] = PclConfig.from_dict(d["pcl"])
        return cls(**d)


def _append_log(log_path, record: Dict) -> None:
    if log_path is None:
        return
    with open(log_path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def set_requires_grad(net: torch.nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad = flag


# ---------------------------------------------------------------------------
# encoder fine-tuning
# ---------------------------------------------------------------------------


def labelled_segments(
    spectrograms: Dict[str, dsp.Spectrogram], labels: Dict[str, int]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """All segments of every labelled (compressed) spectrogram with their class index."""
    segments, targets = [], []
    for uid in sorted(labels):
        for seg in dsp.segment(spectrograms[uid], utterance_id=uid):
            segments.append(seg.data)
            targets.append(labels[uid])
    x = torch.from_numpy(np.stack(segments)[:, None])
    return x, torch.tensor(targets, dtype=torch.long)


def classification_accuracy(backbone: EncoderBackbone, x: torch.Tensor, y: torch.Tensor) -> float:
    backbone.eval()
    with torch.no_grad():
        pred = backbone.classify(x).argmax(dim=-1)
    return float((pred == y).float().mean())


def finetune_stage(
    backbone: EncoderBackbone,
    x: torch.Tensor,
    y: torch.Tensor,
    num_classes: int,
    cfg: EncoderStageConfig,
    seed: int = 0,
    name: str = "stage",
    log_path=None,
    show_progress: bool = False,
) -> List[Dict]:
    """Cross-entropy training of ``backbone`` plus a fresh ``num_classes`` head.

    The head stays attached so the caller can measure accuracy. Returns one
    record per epoch.
    """
    head = backbone.attach_head(num_classes)
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head.reset_parameters()
    opt = torch.optim.Adam(backbone.parameters(), lr=cfg.lr)
    history = []
    for epoch in tqdm(range(cfg.epochs), desc=name, leave=False, disable=not show_progress):
        backbone.train()
        order = torch.randperm(len(y), generator=gen)
        total, correct = 0.0, 0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = backbone.classify(x[idx])
            loss = torch.nn.functional.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"{name}_ce", step=epoch, value=float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
            correct += int((logits.argmax(-1) == y[idx]).sum())
        record = {
            "stage": name,
            "epoch": epoch,
            "loss": total / len(y),
            "train_accuracy": correct / len(y),
        }
        _append_log(log_path, record)
        history.append(record)
    backbone.eval()
    logger.info("%s finished: loss %.4f, accuracy %.3f", name, record["loss"], record["train_accuracy"])
    return history


def finetune_encoder(
    backbone: EncoderBackbone,
    corpus: Optional[Manifest],
    cfg: Optional[EncoderFinetuneConfig] = None,
    target_subset: Optional[Manifest] = None,
    stats: Optional[dsp.CompressionStats] = None,
    stft_cfg: Optional[dsp.StftConfig] = None,
    log_path=None,
    show_progress: bool = False,
) -> Tuple[EncoderBackbone, dsp.CompressionStats]:
    """Two-stage fine-tuning of the noise encoder.

    Stage 1 classifies ``corpus`` by noise type. Stage 2 treats every
    utterance of ``target_subset`` as its own class. The classification head
    is discarded afterwards; the penultimate features are the embedding.

    Returns the backbone and the compression constants its inputs were
    scaled with (fitted on ``corpus`` and ``target_subset`` when not given).
    """
    cfg = cfg or EncoderFinetuneConfig()
    if cfg.stage1.enabled and corpus is None:
        raise ConfigurationError("Noise-type stage needs a labelled corpus")
    if cfg.stage1.enabled:
        missing = [e.utterance_id for e in corpus if e.noise_type is None]
        if missing:
            raise ConfigurationError(
                f"{len(missing)} utterances lack noise-type labels, e.g. {missing[0]}"
            )
    if cfg.stage2.enabled and (target_subset is None or len(target_subset) == 0):
        raise ConfigurationError("Per-utterance stage needs a target subset")

    linear = {}
    if corpus is not None and (cfg.stage1.enabled or stats is None):
        linear.update(load_spectrograms(corpus, stft_cfg, show_progress))
    if target_subset is not None:
        linear.update(load_spectrograms(target_subset, stft_cfg, show_progress))
    if stats is None:
        if not linear:
            raise ConfigurationError("No corpus or target subset to fit compression constants on")
        stats = dsp.fit_compression(linear.values())
    specs = {uid: dsp.compress(s, stats) for uid, s in linear.items()}

    if cfg.stage1.enabled:
        types = corpus.noise_types
        labels = {e.utterance_id: types.index(e.noise_type) for e in corpus}
        x, y = labelled_segments(specs, labels)
        logger.info("Stage 1: %d segments, %d noise types", len(y), len(types))
        finetune_stage(backbone, x, y, len(types), cfg.stage1, cfg.seed, "stage1", log_path, show_progress)
    if cfg.stage2.enabled:
        labels = {uid: i for i, uid in enumerate(target_subset.ids)}
        x, y = labelled_segments(specs, labels)
        logger.info("Stage 2: %d segments, %d utterances", len(y), len(labels))
        finetune_stage(
            backbone, x, y, len(labels), cfg.stage2, cfg.seed + 1, "stage2", log_path, show_progress
        )
    backbone.detach_head()
    backbone.eval()
    return backbone, stats


# ---------------------------------------------------------------------------
# GAN bundle
# ---------------------------------------------------------------------------


class GanBundle:
    """Everything needed to resume training or run simulation."""

    def __init__(
        self,
        generator: FilmResnetGenerator,
        discriminator: PatchDiscriminator,
        encoder: EncoderBackbone,
        projector: PatchProjector,
        stats: dsp.CompressionStats,
        train_cfg: Optional[GanTrainConfig] = None,
        stft_cfg: Optional[dsp.StftConfig] = None,
        target_ids: Sequence[str] = (),
        step: int = 0,
        epoch: int = 0,
        optimizer_state: Optional[Dict] = None,
        rng_state: Optional[torch.Tensor] = None,
    ):
        if generator.embed_dim != encoder.embed_dim:
            raise ConfigurationError(
                f"Generator embed_dim {generator.embed_dim} != encoder {encoder.embed_dim}"
            )
        self.generator = generator
        self.discriminator = discriminator
        self.encoder = encoder
        self.projector = projector
        self.stats = stats
        self.train_cfg = train_cfg or GanTrainConfig()
        self.stft_cfg = stft_cfg or dsp.StftConfig()
        self.target_ids = list(target_ids)
        self.step = step
        self.epoch = epoch
        self.optimizer_state = optimizer_state
        self.rng_state = rng_state
        encoder.eval()
        set_requires_grad(encoder, False)

    @classmethod
    def create(
        cls,
        encoder: EncoderBackbone,
        stats: dsp.CompressionStats,
        gen_spec: Optional[GeneratorSpec] = None,
        disc_spec: Optional[DiscriminatorSpec] = None,
        train_cfg: Optional[GanTrainConfig] = None,
        stft_cfg: Optional[dsp.StftConfig] = None,
        target_ids: Sequence[str] = (),
    ) -> "GanBundle":
        gen_spec = gen_spec or GeneratorSpec()
        train_cfg = train_cfg or GanTrainConfig()
        if train_cfg.pcl.num_layers != len(gen_spec.pcl_layers):
            raise ConfigurationError(
                f"PCL uses {train_cfg.pcl.num_layers} layers, the generator exposes "
                f"{len(gen_spec.pcl_layers)}"
            )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train_cfg.seed)
            generator = FilmResnetGenerator(gen_spec, encoder.embed_dim)
            discriminator = PatchDiscriminator(disc_spec)
            projector = PatchProjector(generator.pcl_channels(), train_cfg.pcl.proj_dim)
        return cls(
            generator,
            discriminator,
            encoder,
            projector,
            stats,
            train_cfg=train_cfg,
            stft_cfg=stft_cfg,
            target_ids=target_ids,
        )

    @property
    def embed_dim(self) -> int:
        return self.encoder.embed_dim

    def digest(self) -> str:
        """md5 of everything that shapes simulated audio: generator and encoder weights, compression."""
        md5 = hashlib.md5()
        for net in (self.generator, self.encoder):
            for name, tensor in sorted(net.state_dict().items()):
                md5.update(name.encode("utf-8"))
                md5.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        extra = {"compression": self.stats.as_dict(), "use_embeddings": self.train_cfg.use_embeddings}
        md5.update(yaml.safe_dump(extra, sort_keys=True).encode("utf-8"))
        return md5.hexdigest()

    def header(self) -> Dict:
        return {
            "kind": "gan",
            "format_version": FORMAT_VERSION,
            "generator": self.generator.spec.as_dict(),
            "discriminator": self.discriminator.spec.as_dict(),
            "encoder": self.encoder.header(),
            "embed_dim": self.embed_dim,
            "compression": self.stats.as_dict(),
            "stft": asdict(self.stft_cfg),
            "train": self.train_cfg.as_dict(),
            "target_ids": list(self.target_ids),
            "step": self.step,
            "epoch": self.epoch,
        }


def _torch_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def write_archive(path, header: Dict, members: Dict[str, bytes]) -> None:
    """Write ``header`` plus ``members`` as one tar, moved into place when complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["md5"] = {name: hashlib.md5(blob).hexdigest() for name, blob in members.items()}
    blobs = {HEADER: yaml.safe_dump(header, sort_keys=True).encode("utf-8")}
    blobs.update(members)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".partial")
    try:
        with os.fdopen(fd, "wb") as f, tarfile.open(fileobj=f, mode="w") as tar:
            for name, blob in blobs.items():
                info = tarfile.TarInfo(name)
                info.size = len(blob)
                tar.addfile(info, io.BytesIO(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.info("Wrote %s", path)


def read_archive(path, kind: str) -> Tuple[Dict, Dict]:
    """Header and validated, deserialised members of a checkpoint."""
    try:
        with tarfile.open(str(path)) as tar:
            raw = {m.name: tar.extractfile(m).read() for m in tar.getmembers() if m.isfile()}
    except (tarfile.TarError, EOFError, OSError) as e:
        raise BundleCorruptError(f"Cannot read checkpoint {path}: {e}") from e
    if HEADER not in raw:
        raise BundleCorruptError(f"Checkpoint {path} has no header")
    try:
        header = yaml.safe_load(raw[HEADER].decode("utf-8"))
    except yaml.YAMLError as e:
        raise BundleCorruptError(f"Unreadable header in {path}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise BundleVersionError(
            f"Checkpoint {path} has format version {header.get('format_version')}, "
            f"this release reads version {FORMAT_VERSION}"
        )
    if header.get("kind") != kind:
        raise ConfigurationError(f"Checkpoint {path} holds a '{header.get('kind')}', not a '{kind}'")
    members = {}
    for name, md5 in header["md5"].items():
        if name not in raw:
            raise BundleCorruptError(f"Checkpoint {path} is missing member {name}")
        calc = hashlib.md5(raw[name]).hexdigest()
        if calc != md5:
            raise BundleCorruptError(
                f"Failed md5 validation of {name} in {path}. Expected: {md5}. Computed: {calc}"
            )
    for name in header["md5"]:
        members[name] = torch.load(io.BytesIO(raw[name]), map_location="cpu")
    return header, members


def save_bundle(bundle: GanBundle, path) -> None:
    members = {
        "generator.pt": _torch_bytes(bundle.generator.state_dict()),
        "discriminator.pt": _torch_bytes(bundle.discriminator.state_dict()),
        "encoder.pt": _torch_bytes(bundle.encoder.state_dict()),
        "projector.pt": _torch_bytes(bundle.projector.state_dict()),
    }
    if bundle.optimizer_state is not None:
        members["optimizers.pt"] = _torch_bytes(bundle.optimizer_state)
    if bundle.rng_state is not None:
        members["rng.pt"] = _torch_bytes(bundle.rng_state)
    write_archive(path, bundle.header(), members)


def load_bundle(path, cache_dir=None) -> GanBundle:
    header, members = read_archive(path, "gan")
    encoder = build_backbone(header["encoder"], cache_dir=cache_dir)
    encoder.load_state_dict(members["encoder.pt"])
    train_cfg = GanTrainConfig.from_dict(header["train"])
    generator = FilmResnetGenerator(GeneratorSpec.from_dict(header["generator"]), header["embed_dim"])
    generator.load_state_dict(members["generator.pt"])
    discriminator = PatchDiscriminator(DiscriminatorSpec.from_dict(header["discriminator"]))
    discriminator.load_state_dict(members["discriminator.pt"])
    projector = PatchProjector(generator.pcl_channels(), train_cfg.pcl.proj_dim)
    projector.load_state_dict(members["projector.pt"])
    return GanBundle(
        generator,
        discriminator,
        encoder,
        projector,
        dsp.CompressionStats.from_dict(header["compression"]),
        train_cfg=train_cfg,
        stft_cfg=dsp.StftConfig(**header["stft"]),
        target_ids=header["target_ids"],
        step=header["step"],
        epoch=header["epoch"],
        optimizer_state=members.get("optimizers.pt"),
        rng_state=members.get("rng.pt"),
    )


def save_encoder(backbone: EncoderBackbone, stats: dsp.CompressionStats, path) -> None:
    header = {
        "kind": "encoder",
        "format_version": FORMAT_VERSION,
        "encoder": backbone.header(),
        "compression": stats.as_dict(),
    }
    write_archive(path, header, {"encoder.pt": _torch_bytes(backbone.state_dict())})


def load_encoder(path, cache_dir=None) -> Tuple[EncoderBackbone, dsp.CompressionStats]:
    header, members = read_archive(path, "encoder")
    backbone = build_backbone(header["encoder"], cache_dir=cache_dir)
    backbone.load_state_dict(members["encoder.pt"])
    backbone.eval()
    return backbone, dsp.CompressionStats.from_dict(header["compression"])


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------


def step_generator(seed: int, step: int) -> torch.Generator:
    """Patch-sampling RNG of one training step."""
    state = np.random.SeedSequence([seed, step]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _valid_mask(segments, like: torch.Tensor) -> torch.Tensor:
    valid = torch.tensor([s.valid_frames for s in segments])
    frames = torch.arange(like.shape[-1])
    return (frames[None, :] < valid[:, None]).to(like.dtype)[:, None, None, :]


def gan_step(
    bundle: GanBundle,
    batch: UnpairedBatch,
    cfg: GanTrainConfig,
    g_opt: torch.optim.Optimizer,
    d_opt: torch.optim.Optimizer,
    step: int,
):
    """One discriminator update followed by one generator/projector update."""
    G, D, B, P = bundle.generator, bundle.discriminator, bundle.encoder, bundle.projector
    y, x = batch.tensors()
    width = y.shape[-1]
    frac_y = min(s.valid_frames for s in batch.clean) / width
    frac_x = min(s.valid_frames for s in batch.noisy) / width
    with torch.no_grad():
        if cfg.use_embeddings:
            n = B.penultimate(x)
        else:
            n = torch.zeros(len(batch), B.embed_dim)
    fake = G(y, n) * _valid_mask(batch.clean, y)

    set_requires_grad(D, True)
    d_opt.zero_grad()
    d_real = D.scores(x)
    adv_d, _ = adv_loss(d_real, D.scores(fake.detach()), cfg.adv_form)
    if not torch.isfinite(adv_d):
        raise TrainingDivergenceError("adv_d", step=step, value=float(adv_d))
    adv_d.backward()
    d_opt.step()

    set_requires_grad(D, False)
    g_opt.zero_grad()
    rng = step_generator(cfg.seed, step)
    _, adv_g = adv_loss(d_real.detach(), D.scores(fake), cfg.adv_form)
    pcl_src = pcl_loss(G.features(y, n), G.features(fake, n), cfg.pcl, P, rng, frac_y)
    idt = G(x, n) * _valid_mask(batch.noisy, x)
    pcl_tgt = pcl_loss(G.features(x, n), G.features(idt, n), cfg.pcl, P, rng, frac_x)
    if cfg.use_embeddings:
        nse = nse_loss(n, fake, B)
    else:
        nse = torch.zeros(())
    report = total_loss(adv_g, pcl_src, pcl_tgt, nse, cfg.lambda_nse, adv_d=adv_d.detach(), step=step)
    report.total.backward()
    g_opt.step()
    set_requires_grad(D, True)
    return report


def checkpoint_path(out_dir, epoch: Optional[int] = None) -> Path:
    name = "bundle.tar" if epoch is None else f"bundle_epoch{epoch:04d}.tar"
    return Path(out_dir) / name


def train_gan(
    bundle: GanBundle,
    clean_pool: SegmentPool,
    noisy_pool: SegmentPool,
    cfg: Optional[GanTrainConfig] = None,
    out_dir=None,
    log_path=None,
    max_steps: Optional[int] = None,
    show_progress: bool = False,
) -> GanBundle:
    """Train ``bundle`` in place and return it.

    Training resumes from ``bundle.step`` with the optimiser and RNG state
    stored in the bundle. ``max_steps`` caps the total step count, so a run
    can be split into several calls. Checkpoints go to ``out_dir`` every
    ``cfg.checkpoint_every`` epochs and at the end.
    """
    cfg = cfg or bundle.train_cfg
    bundle.train_cfg = cfg
    if set(clean_pool.utterance_ids) & set(noisy_pool.utterance_ids):
        raise InvalidInputError("Clean and noisy pools share utterance ids")
    G, D, B, P = bundle.generator, bundle.discriminator, bundle.encoder, bundle.projector
    B.eval()
    set_requires_grad(B, False)
    g_opt = torch.optim.Adam(list(G.parameters()) + list(P.parameters()), lr=cfg.lr, betas=cfg.betas)
    d_opt = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=cfg.betas)
    if bundle.optimizer_state is not None:
        g_opt.load_state_dict(bundle.optimizer_state["generator"])
        d_opt.load_state_dict(bundle.optimizer_state["discriminator"])

    n_steps = steps_per_epoch(noisy_pool, cfg.batch_size)
    total_steps = cfg.epochs * n_steps
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    logger.info(
        "Training from step %d to %d (%d steps per epoch)", bundle.step, total_steps, n_steps
    )

    with torch.random.fork_rng(devices=[]):
        if bundle.rng_state is not None:
            torch.set_rng_state(bundle.rng_state)
        else:
            torch.manual_seed(cfg.seed)
        G.train()
        D.train()
        progress = tqdm(
            total=total_steps, initial=bundle.step, desc="train-gan", leave=False, disable=not show_progress
        )
        while bundle.step < total_steps:
            epoch, index = divmod(bundle.step, n_steps)
            batch = next_batch(clean_pool, noisy_pool, cfg.batch_size, cfg.seed, epoch, index)
            report = gan_step(bundle, batch, cfg, g_opt, d_opt, bundle.step)
            record = {"step": bundle.step, "epoch": epoch}
            record.update(report.as_record())
            _append_log(log_path, record)
            logger.debug("step %d: %s", bundle.step, record)
            bundle.step += 1
            progress.update(1)
            if bundle.step % n_steps == 0:
                bundle.epoch = bundle.step // n_steps
                if out_dir is not None and bundle.epoch % cfg.checkpoint_every == 0:
                    _snapshot(bundle, g_opt, d_opt)
                    save_bundle(bundle, checkpoint_path(out_dir, bundle.epoch))
        progress.close()
        G.eval()
        D.eval()
        _snapshot(bundle, g_opt, d_opt)
    if out_dir is not None:
        save_bundle(bundle, checkpoint_path(out_dir))
    return bundle


def _snapshot(bundle: GanBundle, g_opt, d_opt) -> None:
    bundle.optimizer_state = {
        "generator": g_opt.state_dict(),
        "discriminator": d_opt.state_dict(),
    }
    bundle.rng_state = torch.get_rng_state()
