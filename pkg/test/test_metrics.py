import logging
import math
import sys

import numpy as np
import pytest

from noise_adapt import dsp
from noise_adapt.errors import ConfigurationError, InvalidInputError, ShapeError
from noise_adapt.metrics import (
    MetricRegistry,
    callable_provider,
    command_provider,
    load_registry,
    si_snr,
)


def _no_provider():
    raise ImportError("provider not installed")


def test_si_snr_values(rng):
    ref = rng.standard_normal(4000)
    assert si_snr(3.0 * ref, ref) == math.inf
    noise = rng.standard_normal(4000)
    noise -= noise.mean()
    r = ref - ref.mean()
    # make the noise orthogonal to the reference so the value is exact
    noise -= np.dot(noise, r) / np.dot(r, r) * r
    noise *= np.linalg.norm(r) / np.linalg.norm(noise) / math.sqrt(10)
    assert si_snr(ref + noise, ref) == pytest.approx(10.0, abs=1e-6)
    assert si_snr(2 * (ref + noise), ref) == pytest.approx(10.0, abs=1e-6)
    assert si_snr(dsp.Waveform(ref + noise), dsp.Waveform(ref)) == pytest.approx(10.0, abs=1e-6)


def test_si_snr_errors(rng):
    ref = rng.standard_normal(100)
    with pytest.raises(ShapeError):
        si_snr(ref[:-1], ref)
    with pytest.raises(InvalidInputError):
        si_snr(ref, np.ones(100))


def test_registry_lookup():
    reg = MetricRegistry.default()
    assert reg.names() == ["pesq", "si_snr", "stoi"]
    assert reg.get("si_snr") is si_snr
    with pytest.raises(ConfigurationError):
        reg.get("mos")


def test_registry_unavailable_provider(caplog):
    reg = MetricRegistry()
    reg.register("pesq", _no_provider)
    with caplog.at_level(logging.WARNING, logger="noise_adapt"):
        assert reg.get("pesq") is None
    assert "unavailable" in caplog.text
    assert not reg.available("pesq")
    reg.register("pesq", lambda: si_snr)
    assert reg.available("pesq")


def test_callable_provider(rng):
    fn = callable_provider("noise_adapt.metrics:si_snr")
    ref = rng.standard_normal(100)
    assert fn(ref, ref, 16000) == math.inf
    with pytest.raises(ConfigurationError):
        callable_provider("noise_adapt.metrics")


def test_command_provider(rng):
    script = "import sys, soundfile; print('frames', soundfile.info(sys.argv[1]).frames, 'score', 3.25)"
    fn = command_provider([sys.executable, "-c", script, "{clean}", "{estimate}", "{sample_rate}"])
    x = rng.standard_normal(800)
    assert fn(x, x, 16000) == 3.25
    silent = command_provider([sys.executable, "-c", "pass"])
    with pytest.raises(RuntimeError):
        silent(x, x, 16000)


def test_load_registry(tmpdir):
    path = tmpdir.join("metrics.yaml")
    path.write(
        "metrics:\n"
        "  pesq: {callable: 'noise_adapt.metrics:si_snr'}\n"
        "  custom: {command: [echo, '1.5'], timeout: 5}\n"
    )
    reg = load_registry(str(path))
    assert reg.get("pesq") is si_snr
    assert "custom" in reg.names()
    assert load_registry().names() == ["pesq", "si_snr", "stoi"]
    path.write("metrics:\n  pesq: {url: nowhere}\n")
    with pytest.raises(ConfigurationError):
        load_registry(str(path))
