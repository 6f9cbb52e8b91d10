import pytest

from wardround.dataset import generate_fixtures, write_split
from wardround.retrieval import HashingEmbedder


@pytest.fixture(scope="session")
def split6():
    return generate_fixtures(seed=7, n=6)


@pytest.fixture(scope="session")
def split3():
    return generate_fixtures(seed=3, n=3)


@pytest.fixture(scope="session")
def split20():
    return generate_fixtures(seed=20, n=20)


@pytest.fixture()
def provider():
    return HashingEmbedder()


@pytest.fixture()
def dataset_path(tmp_path, split3):
    path = tmp_path / "data.jsonl"
    write_split(split3, path)
    return path
