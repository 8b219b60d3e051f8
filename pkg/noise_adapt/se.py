"""
Speech-enhancement backends.

``SeBackend`` is the interface the adaptation and evaluation code talks to.
Three implementations ship: ``DeskSeBackend`` (a small causal waveform
U-Net), ``ScriptedSeBackend`` (an external TorchScript model) and
``IdentityBackend`` (returns the noisy input, for the unprocessed baseline).
"""
import abc
import io
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .errors import ConfigurationError, ShapeError, TrainingDivergenceError
from .train import FORMAT_VERSION, read_archive, step_generator, write_archive

logger = logging.getLogger(__name__)

# (n_fft, hop, win_length)
SINGLE_RESOLUTION = ((512, 128, 512),)
MULTI_RESOLUTION = ((512, 50, 240), (1024, 120, 600), (2048, 240, 1200))


@dataclass(frozen=True)
class SeTrainConfig:
    lr: float = 3e-4
    stft_weight: float = 1.0
    stft_resolutions: Tuple[Tuple[int, int, int], ...] = SINGLE_RESOLUTION
    band_mask_prob: float = 0.0
    band_mask_width: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 0 <= self.band_mask_prob <= 1:
            raise ConfigurationError("band_mask_prob must lie in [0, 1]")
        res = tuple(tuple(int(v) for v in r) for r in self.stft_resolutions)
        for n_fft, hop, win in res:
            if hop > win or win > n_fft:
                raise ConfigurationError(f"Invalid STFT resolution {(n_fft, hop, win)}")
        object.__setattr__(self, "stft_resolutions", res)

    def as_dict(self):
        d = asdict(self)
        d["stft_resolutions"] = [list(r) for r in self.stft_resolutions]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _stft_mag(x: torch.Tensor, n_fft: int, hop: int, win: int) -> torch.Tensor:
    spec = torch.stft(
        x,
        n_fft=n_fft,
        hop_length=hop,
        win_length=win,
        window=torch.hann_window(win, dtype=x.dtype, device=x.device),
        return_complex=True,
    )
    return spec.abs().clamp(min=1e-7)


def stft_loss(
    estimate: torch.Tensor, clean: torch.Tensor, resolutions: Sequence[Tuple[int, int, int]]
) -> torch.Tensor:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions."""
    total = 0.0
    for n_fft, hop, win in resolutions:
        est = _stft_mag(estimate, n_fft, hop, win)
        ref = _stft_mag(clean, n_fft, hop, win)
        sc = torch.linalg.norm(ref - est) / torch.linalg.norm(ref)
        mag = F.l1_loss(torch.log(est), torch.log(ref))
        total = total + sc + mag
    return total / len(resolutions)


def band_mask(
    waves: Sequence[torch.Tensor], width: float, generator: torch.Generator, n_fft: int = 512
) -> Tuple[torch.Tensor, ...]:
    """Zero the same random frequency band in every signal of ``waves``."""
    n_bins = n_fft // 2 + 1
    span = max(1, int(width * n_bins))
    lo = int(torch.randint(0, n_bins - span + 1, (1,), generator=generator))
    window = torch.hann_window(n_fft, dtype=waves[0].dtype)
    out = []
    for w in waves:
        spec = torch.stft(w, n_fft, n_fft // 4, window=window, return_complex=True)
        spec[..., lo : lo + span, :] = 0
        out.append(torch.istft(spec, n_fft, n_fft // 4, window=window, length=w.shape[-1]))
    return tuple(out)


class CausalUNet(nn.Module):
    """Strictly causal 1-D convolutional U-Net on raw waveforms.

    Every encoder frame ``t`` sees samples up to ``t * stride`` (left padding
    of ``kernel - 1``); every decoder frame expands to ``stride`` samples of
    the next level without overlap. No normalisation layer looks across
    time, so output sample ``p`` depends only on inputs up to ``p``.
    """

    def __init__(self, depth: int = 4, hidden: int = 16, kernel: int = 8, stride: int = 4):
        super().__init__()
        self.depth = depth
        self.kernel = kernel
        self.stride = stride
        self.encoder = nn.ModuleList()
        self.decoder = nn.ModuleList()
        chin = 1
        for i in range(depth):
            chout = hidden * 2**i
            self.encoder.append(
                nn.Sequential(
                    nn.ConstantPad1d((kernel - 1, 0), 0.0),
                    nn.Conv1d(chin, chout, kernel, stride),
                    nn.ReLU(),
                    nn.Conv1d(chout, chout, 1),
                    nn.ReLU(),
                )
            )
            decode = [nn.Conv1d(chout, chout, 1), nn.ReLU(), nn.ConvTranspose1d(chout, chin, stride, stride)]
            if i > 0:
                decode.append(nn.ReLU())
            self.decoder.insert(0, nn.Sequential(*decode))
            chin = chout
        # the network starts as the identity map
        last = self.decoder[-1][-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != 1:
            raise ShapeError(f"CausalUNet expects [B, 1, T], got {tuple(x.shape)}")
        skips, lengths = [], []
        h = x
        for encode in self.encoder:
            lengths.append(h.shape[-1])
            h = encode(h)
            skips.append(h)
        # the innermost skip is h itself
        skips.pop()
        for decode in self.decoder:
            h = decode(h)[..., : lengths.pop()]
            if skips:
                h = h + skips.pop()
        return x + h


class SeBackend(abc.ABC):
    """A speech enhancer that can be fine-tuned on (noisy, clean) pairs."""

    name = "abstract"
    causal = False
    lookahead = 0

    @abc.abstractmethod
    def enhance(self, noisy: dsp.Waveform) -> dsp.Waveform:
        """Enhanced waveform of the same length as ``noisy``."""

    @abc.abstractmethod
    def train_step(self, noisy: dsp.Waveform, clean: dsp.Waveform) -> float:
        """One optimiser step on a single pair; returns the loss."""

    @abc.abstractmethod
    def save(self, path) -> None:
        pass


class IdentityBackend(SeBackend):
    """Returns its input unchanged."""

    name = "identity"
    causal = True

    def enhance(self, noisy):
        return noisy

    def train_step(self, noisy, clean):
        raise ConfigurationError("The identity backend has nothing to train")

    def save(self, path):
        write_archive(path, _se_header(self.name, {}), {})


def _se_header(backend: str, extra: Dict) -> Dict:
    header = {"kind": "se", "format_version": FORMAT_VERSION, "backend": backend}
    header.update(extra)
    return header


def _bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


class TorchSeBackend(SeBackend):
    """Shared training logic: L1 waveform loss plus STFT magnitude loss, Adam."""

    def __init__(self, model: nn.Module, cfg: Optional[SeTrainConfig] = None):
        self.model = model
        self.cfg = cfg or SeTrainConfig()
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)
        self.steps = 0

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    def enhance(self, noisy):
        self.model.eval()
        x = torch.from_numpy(noisy.samples).float()[None, None]
        with torch.no_grad():
            y = self._forward(x)[0, 0, : len(noisy)]
        return dsp.Waveform(y.double().numpy(), noisy.sample_rate)

    def loss(self, estimate: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
        loss = F.l1_loss(estimate, clean)
        if self.cfg.stft_weight > 0:
            loss = loss + self.cfg.stft_weight * stft_loss(
                estimate.flatten(0, 1), clean.flatten(0, 1), self.cfg.stft_resolutions
            )
        return loss

    def train_step(self, noisy, clean):
        if len(noisy) != len(clean):
            raise ShapeError(f"Pair lengths differ: {len(noisy)} vs {len(clean)}")
        self.model.train()
        x = torch.from_numpy(noisy.samples).float()[None]
        c = torch.from_numpy(clean.samples).float()[None]
        rng = step_generator(self.cfg.seed, self.steps)
        if self.cfg.band_mask_prob > 0 and float(torch.rand((), generator=rng)) < self.cfg.band_mask_prob:
            x, c = band_mask((x, c), self.cfg.band_mask_width, rng)
        estimate = self._forward(x[:, None])[..., : c.shape[-1]]
        loss = self.loss(estimate, c[:, None])
        if not torch.isfinite(loss):
            raise TrainingDivergenceError("se_loss", step=self.steps, value=float(loss))
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.steps += 1
        return float(loss)

    def _members(self) -> Dict[str, bytes]:
        return {
            "model.pt": _bytes(self.model.state_dict()),
            "optimizer.pt": _bytes(self.optimizer.state_dict()),
        }

    def _restore(self, members: Dict, steps: int) -> None:
        self.model.load_state_dict(members["model.pt"])
        self.optimizer.load_state_dict(members["optimizer.pt"])
        self.steps = steps


class DeskSeBackend(TorchSeBackend):
    name = "desk"
    causal = True

    def __init__(self, cfg: Optional[SeTrainConfig] = None, depth=4, hidden=16, kernel=8, stride=4, seed=0):
        self.arch = {"depth": depth, "hidden": hidden, "kernel": kernel, "stride": stride}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = CausalUNet(**self.arch)
        super().__init__(model, cfg)

    def save(self, path):
        header = _se_header(self.name, {"arch": self.arch, "train": self.cfg.as_dict(), "steps": self.steps})
        write_archive(path, header, self._members())


class ScriptedSeBackend(TorchSeBackend):
    """External TorchScript enhancer mapping [B, 1, T] to [B, 1, T'] (T' >= T)."""

    name = "scripted"

    def __init__(self, module: nn.Module, source: str, cfg=None, causal: bool = False):
        super().__init__(module, cfg)
        self.source = source
        self.causal = causal

    def save(self, path):
        header = _se_header(
            self.name,
            {"source": self.source, "causal": self.causal, "train": self.cfg.as_dict(), "steps": self.steps},
        )
        write_archive(path, header, self._members())


def load_scripted_se(path_or_url: str, cfg=None, causal=False, cache_dir=None) -> ScriptedSeBackend:
    from .fetch import resolve

    local = resolve(path_or_url, cache_dir=cache_dir)
    logger.info("Loading external SE model from %s", local)
    return ScriptedSeBackend(torch.jit.load(str(local), map_location="cpu"), path_or_url, cfg, causal)


def build_se_backend(kind: str = "desk", source: Optional[str] = None, cfg=None, cache_dir=None, seed=0):
    if kind == "desk":
        return DeskSeBackend(cfg, seed=seed)
    if kind == "identity":
        return IdentityBackend()
    if kind in ("scripted", "external"):
        if source is None:
            raise ConfigurationError("An external SE backend needs a model path or URL")
        return load_scripted_se(source, cfg, cache_dir=cache_dir)
    raise ConfigurationError(f"Unknown SE backend '{kind}'")


def load_se_backend(path, cache_dir=None) -> SeBackend:
    header, members = read_archive(path, "se")
    kind = header["backend"]
    if kind == "identity":
        return IdentityBackend()
    cfg = SeTrainConfig.from_dict(header["train"])
    if kind == "desk":
        backend = DeskSeBackend(cfg, **header["arch"])
    elif kind == "scripted":
        backend = load_scripted_se(header["source"], cfg, header["causal"], cache_dir)
    else:
        raise ConfigurationError(f"Unknown SE backend '{kind}' in {path}")
    backend._restore(members, header["steps"])
    return backend
