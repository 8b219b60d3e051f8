"""
Loss components of the translator objective.

``adv_loss`` (discriminator and generator sides), ``nse_loss`` (noise
reconstruction through the frozen encoder), ``pcl_loss`` (patch-wise
contrastive loss over generator feature maps) and ``total_loss`` which
composes them into a :class:`LossReport`.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InvalidInputError, ShapeError, TrainingDivergenceError
from .models import EncoderBackbone, NoiseEmbedding

logger = logging.getLogger(__name__)

EPS = 1e-7
ADV_FORMS = ("nonsaturating", "saturating")
NEGATIVE_SOURCES = ("input", "output")


@dataclass(frozen=True)
class PclConfig:
    num_layers: int = 5
    negatives: int = 256
    patches_per_layer: int = 256
    temperature: float = 0.07
    proj_dim: int = 256
    negative_source: str = "input"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("PCL temperature must be > 0")
        if self.negatives < 1 or self.patches_per_layer < 1:
            raise ConfigurationError("negatives and patches_per_layer must be >= 1")
        if self.patches_per_layer > self.negatives + 1:
            raise ConfigurationError(
                f"patches_per_layer={self.patches_per_layer} exceeds the location pool "
                f"of negatives + 1 = {self.negatives + 1}"
            )
        if self.negative_source not in NEGATIVE_SOURCES:
            raise ConfigurationError(f"negative_source must be one of {NEGATIVE_SOURCES}")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PatchProjector(nn.Module):
    """One two-layer MLP (Linear, ReLU, Linear) per feature layer."""

    def __init__(self, channels: Sequence[int], proj_dim: int = 256):
        super().__init__()
        self.channels = list(channels)
        self.mlps = nn.ModuleList(
            [
                nn.Sequential(nn.Linear(c, proj_dim), nn.ReLU(), nn.Linear(proj_dim, proj_dim))
                for c in self.channels
            ]
        )

    def forward(self, layer: int, patches: torch.Tensor) -> torch.Tensor:
        return self.mlps[layer](patches)


def adv_loss(
    d_real: torch.Tensor, d_fake: torch.Tensor, form: str = "nonsaturating", eps: float = EPS
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Adversarial terms from post-sigmoid patch scores.

    Returns ``(adv_d, adv_g)`` with
    ``adv_d = -mean log d_real - mean log(1 - d_fake)`` and
    ``adv_g = -mean log d_fake`` (``form="nonsaturating"``) or
    ``adv_g = mean log(1 - d_fake)`` (``form="saturating"``).
    """
    if form not in ADV_FORMS:
        raise ConfigurationError(f"adv form must be one of {ADV_FORMS}, got '{form}'")
    for name, scores in (("d_real", d_real), ("d_fake", d_fake)):
        if not torch.isfinite(scores).all() or scores.min() < 0 or scores.max() > 1:
            raise InvalidInputError(f"{name} scores must lie in [0, 1]")
    real = d_real.clamp(eps, 1 - eps)
    fake = d_fake.clamp(eps, 1 - eps)
    adv_d = -torch.log(real).mean() - torch.log1p(-fake).mean()
    if form == "nonsaturating":
        adv_g = -torch.log(fake).mean()
    else:
        adv_g = torch.log1p(-fake).mean()
    return adv_d, adv_g


def embedding_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"Embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def nse_loss(
    n_target: Union[NoiseEmbedding, torch.Tensor],
    x_g: torch.Tensor,
    backbone: EncoderBackbone,
) -> torch.Tensor:
    """Mean absolute difference between ``n_target`` and the embedding of ``x_g``.

    The backbone is used as a fixed measurement: callers freeze its
    parameters, gradients still flow into ``x_g``.
    """
    n = n_target.vector if isinstance(n_target, NoiseEmbedding) else n_target
    if n.dim() == 1:
        n = n.unsqueeze(0)
    if n.shape[-1] != backbone.embed_dim:
        raise ShapeError(f"Embedding dim {n.shape[-1]} != backbone dim {backbone.embed_dim}")
    emb = backbone.penultimate(x_g)
    if n.shape[0] == 1 and emb.shape[0] > 1:
        n = n.expand_as(emb)
    return embedding_l1(n.to(emb.dtype), emb)


def sample_patch_locations(
    num_locations: int,
    num_queries: int,
    num_negatives: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Pool of ``num_negatives + 1`` location indices; the first ``num_queries`` are queries.

    Locations are distinct unless fewer than the pool size exist, in which
    case they are drawn with replacement.
    """
    pool = num_negatives + 1
    if num_queries > pool:
        raise ConfigurationError(f"{num_queries} queries exceed the pool of {pool} locations")
    if num_locations >= pool:
        return torch.randperm(num_locations, generator=generator)[:pool]
    logger.warning(
        "Only %d patch locations for a pool of %d, sampling with replacement",
        num_locations,
        pool,
    )
    return torch.randint(num_locations, (pool,), generator=generator)


def _gather(feat: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] features at flat locations -> [B, P, C]."""
    flat = feat.flatten(2).transpose(1, 2)
    return flat[:, locations, :]


def _valid_locations(h: int, w: int, valid_fraction: Optional[float]) -> torch.Tensor:
    cols = w if valid_fraction is None else max(1, min(w, math.ceil(valid_fraction * w)))
    return torch.arange(h * w).view(h, w)[:, :cols].reshape(-1)


def pcl_layer_loss(
    f_in: torch.Tensor,
    f_out: torch.Tensor,
    cfg: PclConfig,
    project=None,
    generator: Optional[torch.Generator] = None,
    valid_fraction: Optional[float] = None,
) -> torch.Tensor:
    """Contrastive loss of one feature layer, mean over batch and queries."""
    if f_in.shape != f_out.shape or f_in.dim() != 4:
        raise ShapeError(f"PCL feature shapes differ: {tuple(f_in.shape)} vs {tuple(f_out.shape)}")
    _, _, h, w = f_in.shape
    candidates = _valid_locations(h, w, valid_fraction)
    picks = sample_patch_locations(
        candidates.numel(), cfg.patches_per_layer, cfg.negatives, generator
    )
    pool = candidates[picks].to(f_in.device)
    num_q = cfg.patches_per_layer
    project = project or (lambda x: x)

    q = F.normalize(project(_gather(f_out, pool[:num_q])), dim=-1)
    k = F.normalize(project(_gather(f_in, pool)), dim=-1)
    if cfg.negative_source == "input":
        neg = k
    else:
        neg = F.normalize(project(_gather(f_out, pool)), dim=-1)
    sims = torch.bmm(q, neg.transpose(1, 2))  # [B, I, J+1]
    pos = (q * k[:, :num_q]).sum(-1, keepdim=True)
    diag = torch.eye(num_q, pool.numel(), dtype=torch.bool, device=sims.device)
    logits = torch.where(diag, pos, sims) / cfg.temperature
    target = torch.arange(num_q, device=sims.device).repeat(sims.shape[0])
    return F.cross_entropy(logits.reshape(-1, pool.numel()), target)


def pcl_loss(
    feats_input: Sequence[torch.Tensor],
    feats_output: Sequence[torch.Tensor],
    cfg: PclConfig,
    projector: Optional[PatchProjector] = None,
    generator: Optional[torch.Generator] = None,
    valid_fraction: Optional[float] = None,
) -> torch.Tensor:
    """Patch-wise contrastive loss summed over feature layers.

    For every layer the query is the projected output patch at a sampled
    location, the positive the projected input patch at the same location,
    and the negatives the other locations of the pool taken from
    ``cfg.negative_source``. Projections are L2 normalised and compared at
    temperature ``cfg.temperature``. ``valid_fraction`` restricts sampling to
    the leading share of the time axis (the non-padded frames).
    """
    if len(feats_input) != len(feats_output):
        raise ShapeError(f"{len(feats_input)} input layers vs {len(feats_output)} output layers")
    if projector is not None and len(projector.mlps) != len(feats_input):
        raise ShapeError(f"Projector has {len(projector.mlps)} heads for {len(feats_input)} layers")
    total = 0.0
    for layer, (f_in, f_out) in enumerate(zip(feats_input, feats_output)):
        project = None if projector is None else (lambda x, _l=layer: projector(_l, x))
        total = total + pcl_layer_loss(f_in, f_out, cfg, project, generator, valid_fraction)
    return total


@dataclass(frozen=True, eq=False)
class LossReport:
    adv_d: torch.Tensor
    adv_g: torch.Tensor
    pcl_src: torch.Tensor
    pcl_tgt: torch.Tensor
    nse: torch.Tensor
    total: torch.Tensor
    lambda_nse: float = 10.0

    def as_record(self) -> Dict[str, float]:
        return {
            "adv_d": float(self.adv_d),
            "adv_g": float(self.adv_g),
            "pcl_src": float(self.pcl_src),
            "pcl_tgt": float(self.pcl_tgt),
            "nse": float(self.nse),
            "total": float(self.total),
        }


def total_loss(
    adv_g,
    pcl_src,
    pcl_tgt,
    nse,
    lambda_nse: float = 10.0,
    adv_d=None,
    step: Optional[int] = None,
) -> LossReport:
    """Compose the generator objective ``adv_g + pcl_src + pcl_tgt + lambda_nse * nse``.

    ``adv_d`` is carried for logging only; the discriminator is updated from
    it separately.
    """
    parts = {
        "adv_g": torch.as_tensor(adv_g),
        "pcl_src": torch.as_tensor(pcl_src),
        "pcl_tgt": torch.as_tensor(pcl_tgt),
        "nse": torch.as_tensor(nse),
        "adv_d": torch.as_tensor(0.0 if adv_d is None else adv_d),
    }
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise TrainingDivergenceError(name, step=step, value=float(value))
    total = parts["adv_g"] + parts["pcl_src"] + parts["pcl_tgt"] + lambda_nse * parts["nse"]
    if not torch.isfinite(total):
        raise TrainingDivergenceError("total", step=step, value=float(total))
    return LossReport(total=total, lambda_nse=lambda_nse, **parts)
