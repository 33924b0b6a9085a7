import os

import pytest


@pytest.fixture(scope="session", autouse=True)
def _isolated_cache(tmp_path_factory):
    """Point the shared feature/ingest cache at a session-temporary directory
    so tests never read or pollute the user's real cache."""
    path = tmp_path_factory.mktemp("ndgan-cache")
    old = os.environ.get("NDGAN_CACHE_DIR")
    os.environ["NDGAN_CACHE_DIR"] = str(path)
    yield
    if old is None:
        os.environ.pop("NDGAN_CACHE_DIR", None)
    else:
        os.environ["NDGAN_CACHE_DIR"] = old
