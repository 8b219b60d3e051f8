"""
Networks: FiLM-conditioned residual generator, patch discriminator and the
noise encoder backbones.

All networks work on compressed magnitude segments shaped [B, 1, 129, 128].
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .errors import ConfigurationError, InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

NUM_RES_BLOCKS = 9
DISCRIMINATOR_STRIDES = (2, 2, 2, 1, 1)
# input, both downsampling convs, 4th and 8th residual block
DEFAULT_PCL_LAYERS = ("input", "down1", "down2", "res4", "res8")


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 64
    res_blocks: int = NUM_RES_BLOCKS
    dropout: float = 0.5
    pcl_layers: Tuple[str, ...] = DEFAULT_PCL_LAYERS

    def __post_init__(self):
        if self.res_blocks != NUM_RES_BLOCKS:
            raise ConfigurationError(f"The generator has exactly {NUM_RES_BLOCKS} residual blocks")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        for name in self.pcl_layers:
            _layer_depth(name)
        object.__setattr__(self, "pcl_layers", tuple(self.pcl_layers))

    @property
    def film_sites(self) -> int:
        return self.res_blocks + 1

    def as_dict(self):
        d = asdict(self)
        d["pcl_layers"] = list(self.pcl_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 64
    strides: Tuple[int, ...] = DISCRIMINATOR_STRIDES
    kernel: int = 4
    padding: int = 1
    negative_slope: float = 0.2

    def __post_init__(self):
        strides = tuple(self.strides)
        if len(strides) != 5 or strides[:3] != (2, 2, 2) or strides[3:] != (1, 1):
            raise ConfigurationError(f"Discriminator strides must be {DISCRIMINATOR_STRIDES}")
        object.__setattr__(self, "strides", strides)

    def as_dict(self):
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class NoiseEmbedding:
    vector: torch.Tensor
    source_utterance_id: str = ""

    def __post_init__(self):
        vec = torch.as_tensor(self.vector)
        if vec.dim() != 1:
            raise ShapeError(f"NoiseEmbedding must be 1-D, got shape {tuple(vec.shape)}")
        if not torch.isfinite(vec).all():
            raise InvalidInputError("NoiseEmbedding contains non-finite entries")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True, eq=False)
class FiLMParams:
    weight: torch.Tensor
    bias: torch.Tensor


def film_apply(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation ``weight[c] * F[c] + bias[c]``.

    ``features`` is [C, H, W] or [B, C, H, W]; ``weight`` and ``bias`` are
    [C] or [B, C].
    """
    if weight.shape != bias.shape:
        raise ShapeError(f"FiLM weight {tuple(weight.shape)} and bias {tuple(bias.shape)} differ")
    if features.dim() not in (3, 4) or features.shape[-3] != weight.shape[-1]:
        raise ShapeError(
            f"FiLM over {weight.shape[-1]} channels cannot modulate features "
            f"of shape {tuple(features.shape)}"
        )
    return weight[..., None, None] * features + bias[..., None, None]


class FiLMLayer(nn.Module):
    """Two independent linear maps from the embedding to (W, b).

    Initialised so that a zero embedding yields W = 1, b = 0.
    """

    def __init__(self, embed_dim: int, channels: int, init_std: float = 0.01):
        super().__init__()
        self.to_weight = nn.Linear(embed_dim, channels)
        self.to_bias = nn.Linear(embed_dim, channels)
        nn.init.normal_(self.to_weight.weight, 0.0, init_std)
        nn.init.ones_(self.to_weight.bias)
        nn.init.normal_(self.to_bias.weight, 0.0, init_std)
        nn.init.zeros_(self.to_bias.bias)

    def forward(self, n: torch.Tensor) -> FiLMParams:
        return FiLMParams(weight=self.to_weight(n), bias=self.to_bias(n))

    def set_identity(self):
        with torch.no_grad():
            self.to_weight.weight.zero_()
            self.to_weight.bias.fill_(1.0)
            self.to_bias.weight.zero_()
            self.to_bias.bias.zero_()


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
        ]
        if dropout > 0:
            layers += [nn.Dropout(dropout)]
        layers += [nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, kernel_size=3), nn.InstanceNorm2d(dim)]
        self.conv_block = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.conv_block(x)


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    """N(0, gain) for conv weights, zero biases."""

    def init_func(m):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    net.apply(init_func)


def _layer_depth(name: str) -> int:
    """Execution depth of a named feature layer: input=0, down1=1, down2=2, resK=2+K."""
    fixed = {"input": 0, "down1": 1, "down2": 2}
    if name in fixed:
        return fixed[name]
    if name.startswith("res") and name[3:].isdigit() and 1 <= int(name[3:]) <= NUM_RES_BLOCKS:
        return 2 + int(name[3:])
    raise ConfigurationError(f"Unknown generator feature layer '{name}'")


class FilmResnetGenerator(nn.Module):
    """Residual spectrogram translator with FiLM conditioning.

    Two stride-2 convolutions, nine residual blocks and two stride-2
    transposed convolutions. FiLM modulates the encoder output and the output
    of every residual block (10 sites). The head adds its output to the
    input, so the network learns a correction of the clean spectrogram.
    """

    def __init__(self, spec: GeneratorSpec, embed_dim: int, film_init_std: float = 0.01):
        super().__init__()
        self.spec = spec
        self.embed_dim = embed_dim
        c = spec.base_channels
        self.down1 = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(1, c, 3, stride=2), nn.InstanceNorm2d(c), nn.ReLU(True)
        )
        self.down2 = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(c, 2 * c, 3, stride=2),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(True),
        )
        self.blocks = nn.ModuleList([ResnetBlock(2 * c, spec.dropout) for _ in range(spec.res_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(True),
        )
        self.up2 = nn.ConvTranspose2d(c, 1, 3, stride=2, padding=1, output_padding=1)
        init_weights(self)
        self.films = nn.ModuleList(
            [FiLMLayer(embed_dim, 2 * c, film_init_std) for _ in range(spec.film_sites)]
        )

    def pcl_channels(self) -> List[int]:
        c = self.spec.base_channels
        channels = {"input": 1, "down1": c}
        return [channels.get(name, 2 * c) for name in self.spec.pcl_layers]

    def zero_residual(self):
        """Make the head contribute nothing, so G(y, n) == y."""
        with torch.no_grad():
            self.up2.weight.zero_()
            self.up2.bias.zero_()

    def _check_input(self, y):
        if y.dim() != 4 or y.shape[1] != 1:
            raise ShapeError(f"Generator input must be [B, 1, F, T], got {tuple(y.shape)}")

    def _film_params(self, y, n, film) -> List[Optional[FiLMParams]]:
        if film is not None:
            if len(film) != self.spec.film_sites:
                raise ShapeError(f"Expected {self.spec.film_sites} FiLM parameter sets, got {len(film)}")
            return list(film)
        if n is None:
            return [None] * self.spec.film_sites
        if n.dim() == 1:
            n = n.unsqueeze(0)
        if n.dim() != 2 or n.shape[1] != self.embed_dim:
            raise ShapeError(
                f"Embedding of shape {tuple(n.shape)} does not match embed_dim={self.embed_dim}"
            )
        if n.shape[0] not in (1, y.shape[0]):
            raise ShapeError(f"{n.shape[0]} embeddings for a batch of {y.shape[0]}")
        return [layer(n) for layer in self.films]

    @staticmethod
    def _modulate(h, p):
        return h if p is None else film_apply(h, p.weight, p.bias)

    @staticmethod
    def _pad(y):
        pad_h = (-y.shape[-2]) % 4
        pad_w = (-y.shape[-1]) % 4
        if pad_h or pad_w:
            y = F.pad(y, (0, pad_w, 0, pad_h), mode="reflect")
        return y

    def _run(self, y, n, film, stop_depth: Optional[int]):
        """Run up to ``stop_depth`` (None: full pass); returns (output, features by depth)."""
        self._check_input(y)
        params = self._film_params(y, n, film)
        feats: Dict[int, torch.Tensor] = {}
        h = self._pad(y)
        feats[0] = h
        if stop_depth == 0:
            return None, feats
        h = self.down1(h)
        feats[1] = h
        if stop_depth == 1:
            return None, feats
        h = self._modulate(self.down2(h), params[0])
        feats[2] = h
        for i, block in enumerate(self.blocks):
            if stop_depth is not None and stop_depth < 3 + i:
                return None, feats
            h = self._modulate(block(h), params[i + 1])
            feats[3 + i] = h
        if stop_depth is not None:
            return None, feats
        h = self.up2(self.up1(h))
        return y + h[..., : y.shape[-2], : y.shape[-1]], feats

    def forward(
        self,
        y: torch.Tensor,
        n: Optional[torch.Tensor] = None,
        film: Optional[Sequence[FiLMParams]] = None,
    ) -> torch.Tensor:
        """Translate ``y``; ``n=None`` and ``film=None`` skip conditioning."""
        out, _ = self._run(y, n, film, None)
        return out

    def features(
        self,
        y: torch.Tensor,
        n: Optional[torch.Tensor] = None,
        film: Optional[Sequence[FiLMParams]] = None,
    ) -> List[torch.Tensor]:
        """Feature maps at ``spec.pcl_layers`` for the contrastive loss."""
        depths = [_layer_depth(name) for name in self.spec.pcl_layers]
        _, feats = self._run(y, n, film, max(depths))
        return [feats[d] for d in depths]


def film_params_from_embedding(
    n: Union[NoiseEmbedding, torch.Tensor], site: int, generator: FilmResnetGenerator
) -> FiLMParams:
    if not 0 <= site < generator.spec.film_sites:
        raise InvalidInputError(f"FiLM site {site} outside [0, {generator.spec.film_sites - 1}]")
    vec = n.vector if isinstance(n, NoiseEmbedding) else n
    if vec.shape[-1] != generator.embed_dim:
        raise ShapeError(f"Embedding dim {vec.shape[-1]} != {generator.embed_dim}")
    return generator.films[site](vec)


def generator_forward(
    y: dsp.SpectrogramSegment,
    n: Optional[NoiseEmbedding],
    generator: FilmResnetGenerator,
) -> dsp.SpectrogramSegment:
    x = torch.from_numpy(y.data)[None, None]
    with torch.no_grad():
        out = generator(x, None if n is None else n.vector[None])
    return dsp.SpectrogramSegment(
        data=out[0, 0].numpy(),
        utterance_id=y.utterance_id,
        frame_offset=y.frame_offset,
        valid_frames=y.valid_frames,
    )


class PatchDiscriminator(nn.Module):
    """Five 4x4 convolutions, strides (2, 2, 2, 1, 1), producing a patch logit map."""

    def __init__(self, spec: Optional[DiscriminatorSpec] = None):
        super().__init__()
        self.spec = spec = spec or DiscriminatorSpec()
        c = spec.base_channels
        channels = [c, 2 * c, 4 * c, 8 * c, 1]
        last = len(spec.strides) - 1
        sequence = []
        in_c = 1
        for i, (out_c, stride) in enumerate(zip(channels, spec.strides)):
            sequence += [nn.Conv2d(in_c, out_c, spec.kernel, stride=stride, padding=spec.padding)]
            if 0 < i < last:
                sequence += [nn.InstanceNorm2d(out_c)]
            if i < last:
                sequence += [nn.LeakyReLU(spec.negative_slope, True)]
            in_c = out_c
        self.model = nn.Sequential(*sequence)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"Discriminator input must be [B, 1, F, T], got {tuple(x.shape)}")
        return self.model(x)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(x))


def score_map_shape(height: int, width: int, spec: Optional[DiscriminatorSpec] = None):
    spec = spec or DiscriminatorSpec()
    for stride in spec.strides:
        height = (height + 2 * spec.padding - spec.kernel) // stride + 1
        width = (width + 2 * spec.padding - spec.kernel) // stride + 1
    return height, width


def discriminator_forward(x: dsp.SpectrogramSegment, discriminator: PatchDiscriminator) -> np.ndarray:
    if x.data.shape != (dsp.SEGMENT_BINS, dsp.SEGMENT_FRAMES):
        raise ShapeError(f"Discriminator expects a 129x128 segment, got {x.data.shape}")
    with torch.no_grad():
        scores = discriminator.scores(torch.from_numpy(x.data)[None, None])
    return scores[0, 0].numpy()


class EncoderBackbone(nn.Module):
    """Noise encoder interface.

    Subclasses implement ``frame_features`` returning [B, T', D]; the noise
    embedding is its mean over time. A linear classification head can be
    attached for fine-tuning and detached afterwards.
    """

    kind = "abstract"

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.head: Optional[nn.Linear] = None

    def frame_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self.frame_features(x).mean(dim=1)

    def attach_head(self, num_classes: int) -> nn.Linear:
        self.head = nn.Linear(self.embed_dim, num_classes)
        return self.head

    def detach_head(self) -> None:
        self.head = None

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise ConfigurationError("No classification head attached to the encoder")
        return self.head(self.penultimate(x))

    def header(self) -> Dict:
        return {"kind": self.kind, "embed_dim": self.embed_dim}


class DeskEncoder(EncoderBackbone):
    """Four conv blocks (conv, batch norm, ReLU, 2x2 max-pool) trained from scratch."""

    kind = "desk"

    def __init__(self, embed_dim: int = 128, channels: Sequence[int] = (16, 32, 64)):
        super().__init__(embed_dim)
        widths = list(channels) + [embed_dim]
        blocks = []
        in_c = 1
        for out_c in widths:
            blocks += [
                nn.Conv2d(in_c, out_c, 3, padding=1),
                nn.BatchNorm2d(out_c),
                nn.ReLU(True),
                nn.MaxPool2d(2),
            ]
            in_c = out_c
        self.blocks = nn.Sequential(*blocks)

    def frame_features(self, x):
        h = self.blocks(x)  # [B, D, F', T']
        return h.mean(dim=2).transpose(1, 2)


class ScriptedEncoder(EncoderBackbone):
    """Wraps an external TorchScript encoder returning [B, T', D] (or [B, D])."""

    kind = "scripted"

    def __init__(self, module: nn.Module, embed_dim: int = 768, source: Optional[str] = None):
        super().__init__(embed_dim)
        self.module = module
        self.source = source

    def frame_features(self, x):
        h = self.module(x)
        if h.dim() == 2:
            h = h.unsqueeze(1)
        if h.shape[-1] != self.embed_dim:
            raise ShapeError(f"External encoder returned dim {h.shape[-1]}, expected {self.embed_dim}")
        return h

    def header(self):
        d = super().header()
        d["source"] = self.source
        return d


def load_scripted_encoder(path_or_url: str, embed_dim: int = 768, cache_dir=None) -> ScriptedEncoder:
    from .fetch import resolve

    local = resolve(path_or_url, cache_dir=cache_dir)
    logger.info("Loading external encoder from %s", local)
    return ScriptedEncoder(torch.jit.load(str(local), map_location="cpu"), embed_dim, source=path_or_url)


def build_backbone(header: Dict, cache_dir=None) -> EncoderBackbone:
    """Re-create an (untrained) backbone from its checkpoint header."""
    kind = header.get("kind", "desk")
    if kind == "desk":
        return DeskEncoder(embed_dim=int(header["embed_dim"]))
    if kind == "scripted":
        return load_scripted_encoder(header["source"], int(header["embed_dim"]), cache_dir)
    raise ConfigurationError(f"Unknown encoder kind '{kind}'")


def encoder_embed(x: dsp.SpectrogramSegment, backbone: EncoderBackbone) -> NoiseEmbedding:
    with torch.no_grad():
        vec = backbone.penultimate(torch.from_numpy(x.data)[None, None])[0]
    return NoiseEmbedding(vec, source_utterance_id=x.utterance_id)


def encoder_classify(x: dsp.SpectrogramSegment, backbone: EncoderBackbone) -> torch.Tensor:
    with torch.no_grad():
        return backbone.classify(torch.from_numpy(x.data)[None, None])[0]
