import numpy as np
import pytest

from rbe.binvec import RbeEmbedding, pack_rows
from rbe.synthetic import make_benchmark
from rbe.trainer import TrainConfig, train


def random_signs(rng, *shape):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)


def random_embedding(rng, n_planes, dim, weighted=True):
    return RbeEmbedding.from_signs(random_signs(rng, n_planes, dim), weighted)


def random_planes(rng, n_planes, count, dim):
    """Packed ``(n_planes, count, words)`` planes with canonical zero padding."""
    signs = random_signs(rng, n_planes * count, dim)
    return pack_rows(signs).reshape(n_planes, count, -1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return make_benchmark(seed=7, n_train=600, n_valid=128, n_test=200)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    config = TrainConfig(m=16, n=8, u=1, v=1, hash_dim=1024, epochs=4, seed=3)
    return train(small_dataset, config).params


ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_VARIANTS = ("1bit", "2bit", "2bit_unweighted", "full_precision")


@pytest.fixture(scope="session")
def ablation_rows():
    """One training run per (variant, seed) on the committed benchmark; shared across modules."""
    from rbe import ablation

    return ablation.run(ABLATION_VARIANTS, ABLATION_SEEDS)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
