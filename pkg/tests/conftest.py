import pytest

from miselab.data import SynthConfig, generate_corpus
from miselab.episodes import split_periods
from miselab.meta import TrainConfig, meta_train

# small-but-real settings shared by the behavioural tests; acceptance tests
# pin their own
TINY_TRAIN = TrainConfig(max_steps=8, alpha=5e-3, adapt_steps=4,
                         emb_dim=16, hidden_dim=16, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(SynthConfig(posts_per_period=26, num_periods=3, seed=11))


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return split_periods(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_meta(tiny_split):
    return meta_train(tiny_split, TINY_TRAIN)
