import pytest

from mmdiscourse.corpus import load_dataset

from helpers import build_toy_corpus, toy_run_config


@pytest.fixture
def toy_dataset(tmp_path):
    """Path to a 20-post learnable synthetic dataset with inline captions."""
    return build_toy_corpus(tmp_path / "corpus")


@pytest.fixture
def toy_posts(toy_dataset):
    return load_dataset(toy_dataset, require_labels=True)


@pytest.fixture
def toy_cfg():
    return toy_run_config()
