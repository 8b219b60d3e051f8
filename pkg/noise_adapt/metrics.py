"""
Enhancement metrics.

SI-SNR is computed here. PESQ and STOI come from external providers that
are looked up lazily in a :class:`MetricRegistry`; a provider that cannot be
loaded is reported as unavailable rather than failing the evaluation.
"""
import importlib
import logging
import math
import re
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import soundfile as sf
import yaml

from . import dsp
from .errors import ConfigurationError, InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

SI_SNR_CEILING = 60.0

MetricFn = Callable[[np.ndarray, np.ndarray, int], float]


def _samples(x: Union[dsp.Waveform, np.ndarray]) -> np.ndarray:
    return x.samples if isinstance(x, dsp.Waveform) else np.asarray(x, dtype=np.float64)


def si_snr(estimate, reference, sample_rate: Optional[int] = None) -> float:
    """Scale-invariant SNR in dB; ``inf`` when the estimate is a scaled reference."""
    est = _samples(estimate)
    ref = _samples(reference)
    if est.shape != ref.shape:
        raise ShapeError(f"Estimate of {est.shape} samples vs reference of {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise InvalidInputError("Reference signal has zero energy")
    target = np.dot(est, ref) / ref_energy * ref
    residual = est - target
    target_energy = np.dot(target, target)
    residual_energy = np.dot(residual, residual)
    if residual_energy <= 1e-12 * target_energy:
        return math.inf
    if target_energy == 0:
        return -math.inf
    return 10.0 * math.log10(target_energy / residual_energy)


def _pesq_provider() -> MetricFn:
    from pesq import pesq

    def fn(estimate, reference, sample_rate):
        mode = "wb" if sample_rate == 16000 else "nb"
        return float(pesq(sample_rate, reference, estimate, mode))

    return fn


def _stoi_provider() -> MetricFn:
    from pystoi import stoi

    def fn(estimate, reference, sample_rate):
        return 100.0 * float(stoi(reference, estimate, sample_rate, extended=False))

    return fn


def callable_provider(spec: str) -> MetricFn:
    """``"package.module:function"`` taking (estimate, reference, sample_rate)."""
    module, _, attr = spec.partition(":")
    if not attr:
        raise ConfigurationError(f"Callable provider '{spec}' must look like 'module:function'")
    return getattr(importlib.import_module(module), attr)


def command_provider(command: Sequence[str], timeout: float = 600) -> MetricFn:
    """Executable provider.

    ``command`` is an argument list in which ``{clean}``, ``{estimate}`` and
    ``{sample_rate}`` are substituted; the last number printed on stdout is
    the score.
    """

    def fn(estimate, reference, sample_rate):
        with tempfile.TemporaryDirectory() as tmp:
            clean_path = Path(tmp) / "clean.wav"
            est_path = Path(tmp) / "estimate.wav"
            sf.write(str(clean_path), reference, sample_rate, subtype="FLOAT")
            sf.write(str(est_path), estimate, sample_rate, subtype="FLOAT")
            args = [
                a.format(clean=clean_path, estimate=est_path, sample_rate=sample_rate)
                for a in command
            ]
            out = subprocess.run(args, capture_output=True, text=True, timeout=timeout, check=True)
        numbers = re.findall(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?", out.stdout)
        if not numbers:
            raise RuntimeError(f"Metric command {command[0]} printed no score")
        return float(numbers[-1])

    return fn


class MetricRegistry:
    """Metric name -> provider, resolved on first use."""

    def __init__(self):
        self._factories: Dict[str, Callable[[], MetricFn]] = {}
        self._resolved: Dict[str, Optional[MetricFn]] = {}

    @classmethod
    def default(cls) -> "MetricRegistry":
        reg = cls()
        reg.register("si_snr", lambda: si_snr)
        reg.register("pesq", _pesq_provider)
        reg.register("stoi", _stoi_provider)
        return reg

    def register(self, name: str, factory: Callable[[], MetricFn]) -> None:
        self._factories[name] = factory
        self._resolved.pop(name, None)

    def names(self):
        return sorted(self._factories)

    def get(self, name: str) -> Optional[MetricFn]:
        """Provider for ``name``, or None (with a warning) when it cannot be loaded."""
        if name not in self._factories:
            raise ConfigurationError(f"Unknown metric '{name}'; known: {self.names()}")
        if name not in self._resolved:
            try:
                self._resolved[name] = self._factories[name]()
            except Exception as e:
                logger.warning("Metric provider for %s is unavailable: %s", name, e)
                self._resolved[name] = None
        return self._resolved[name]

    def available(self, name: str) -> bool:
        return self.get(name) is not None


def load_registry(path=None) -> MetricRegistry:
    """Default registry, overridden by a YAML file of the form::

        metrics:
          pesq: {command: [pesq-cli, "{clean}", "{estimate}"]}
          stoi: {callable: "mypkg.metrics:stoi"}
    """
    reg = MetricRegistry.default()
    if path is None:
        return reg
    with open(path) as f:
        conf = yaml.safe_load(f) or {}
    for name, entry in (conf.get("metrics") or {}).items():
        if "callable" in entry:
            reg.register(name, lambda spec=entry["callable"]: callable_provider(spec))
        elif "command" in entry:
            reg.register(
                name,
                lambda cmd=entry["command"], t=entry.get("timeout", 600): command_provider(cmd, t),
            )
        else:
            raise ConfigurationError(f"Metric '{name}' needs a 'callable' or a 'command'")
    return reg
