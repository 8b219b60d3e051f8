"""
Retrieval of external model checkpoints (TorchScript encoders and SE models).

Local paths are returned unchanged; http(s) URLs are downloaded once into a
cache directory with exponential backoff.
"""
import logging
import os
import random
import tempfile
import time
from pathlib import Path
from urllib.parse import urlparse

import requests
from tqdm import tqdm

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 16 * 1024
DEFAULT_CACHE_DIR = Path(tempfile.gettempdir()) / "noise-adapt-cache"


def _download(
    url,
    target_directory,
    session: requests.Session,
    *,
    proxies=None,
    ssl_verify=None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    show_progress=False,
    con_timeout=360,
):
    """Download `url` into `target_directory`

    The file is written under a temporary name and renamed once complete.

    Returns
    -------
    path : Path
        Location of the downloaded file
    """
    logger.info("download_url=%s", url)
    target_filename = url.split("/")[-1] or "checkpoint"
    final = Path(target_directory) / target_filename
    partial = final.with_name(final.name + ".partial")
    logger.debug("downloading to %s", partial)
    ret = session.get(url, stream=True, proxies=proxies, verify=ssl_verify, timeout=con_timeout)
    ret.raise_for_status()
    size = int(ret.headers.get("Content-Length", 0))
    progress = tqdm(
        desc=target_filename,
        disable=(size < 1024) or not show_progress,
        total=size,
        leave=False,
        unit="byte",
        unit_scale=True,
    )
    with open(partial, "w+b") as tf:
        for data in ret.iter_content(chunk_size):
            tf.write(data)
            progress.update(len(data))
    progress.close()
    os.replace(partial, final)
    return final


def download_with_retry(
    url,
    target_directory,
    session: requests.Session = None,
    *,
    proxies=None,
    ssl_verify=None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    max_retries: int = 10,
    show_progress=False,
    con_timeout=360,
):
    """Download `url` to `target_directory` with exponential backoff in the
    event of failure.

    Parameters
    ----------
    max_retries : int, optional
        The maximum number of attempts before the download error is reraised,
        default 10.
    """
    session = session or requests.Session()
    c = 0
    two_c = 1
    delay = 5.12e-5  # 51.2 us
    while True:
        c += 1
        two_c *= 2
        try:
            return _download(
                url,
                target_directory,
                session,
                proxies=proxies,
                ssl_verify=ssl_verify,
                chunk_size=chunk_size,
                show_progress=show_progress,
                con_timeout=con_timeout,
            )
        except Exception:
            if c < max_retries:
                logger.debug(f"downloading failed, retrying {c}/{max_retries}")
                time.sleep(delay * random.randint(0, two_c - 1))
            else:
                raise


def is_url(path_or_url) -> bool:
    return urlparse(str(path_or_url)).scheme in ("http", "https")


def resolve(path_or_url, cache_dir=None, **kwargs) -> Path:
    """Local path of a checkpoint, downloading it first when given a URL."""
    if not is_url(path_or_url):
        path = Path(path_or_url)
        if not path.exists():
            raise FileNotFoundError(f"No checkpoint at {path}")
        return path
    cache = Path(cache_dir) if cache_dir is not None else DEFAULT_CACHE_DIR
    cache.mkdir(parents=True, exist_ok=True)
    cached = cache / (str(path_or_url).split("/")[-1] or "checkpoint")
    if cached.exists():
        logger.debug("using cached %s", cached)
        return cached
    return download_with_retry(path_or_url, cache, **kwargs)
