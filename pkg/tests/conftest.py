import pytest

from calvsign import synthdata as sd
from calvsign.streams import featurize


@pytest.fixture(scope="session")
def default_corpus():
    return sd.generate_corpus(seed=0)


@pytest.fixture(scope="session")
def default_feats(default_corpus):
    return featurize(default_corpus)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Four cows with one-hour segments: 16 windows, enough for a nested split."""
    return sd.generate_corpus(sd.CorpusConfig(n_cows=4, segment_hours=1.0), seed=1)


@pytest.fixture(scope="session")
def tiny_feats(tiny_corpus):
    return featurize(tiny_corpus)
