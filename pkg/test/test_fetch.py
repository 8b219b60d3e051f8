import pytest
import requests

from noise_adapt import fetch


class _Response:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status
        self.headers = {"Content-Length": str(len(payload))}

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"status {self.status}")

    def iter_content(self, chunk_size):
        for i in range(0, len(self.payload), chunk_size):
            yield self.payload[i : i + chunk_size]


class _Session:
    """Fails ``failures`` times before serving ``payload``."""

    def __init__(self, payload, failures=0):
        self.payload = payload
        self.failures = failures
        self.calls = []

    def get(self, url, **kwargs):
        self.calls.append(url)
        if len(self.calls) <= self.failures:
            return _Response(b"", status=503)
        return _Response(self.payload)


URL = "https://models.example.org/se/enhancer.pt"


def test_is_url():
    assert fetch.is_url(URL)
    assert not fetch.is_url("/tmp/enhancer.pt")
    assert not fetch.is_url("enhancer.pt")


def test_resolve_local(tmpdir):
    path = tmpdir.join("model.pt")
    path.write("x")
    assert str(fetch.resolve(str(path))) == str(path)
    with pytest.raises(FileNotFoundError):
        fetch.resolve(str(tmpdir.join("missing.pt")))


def test_download_with_retry(tmpdir):
    session = _Session(b"0123456789" * 5000, failures=2)
    path = fetch.download_with_retry(URL, str(tmpdir), session, chunk_size=1000)
    assert path.name == "enhancer.pt"
    assert path.read_bytes() == session.payload
    assert len(session.calls) == 3
    assert not list(path.parent.glob("*.partial"))


def test_download_gives_up(tmpdir):
    session = _Session(b"data", failures=10)
    with pytest.raises(requests.HTTPError):
        fetch.download_with_retry(URL, str(tmpdir), session, max_retries=3)
    assert len(session.calls) == 3


def test_resolve_caches(tmpdir):
    session = _Session(b"weights")
    cache = tmpdir.join("cache")
    first = fetch.resolve(URL, cache_dir=str(cache), session=session)
    second = fetch.resolve(URL, cache_dir=str(cache), session=session)
    assert first == second
    assert first.read_bytes() == b"weights"
    assert len(session.calls) == 1
