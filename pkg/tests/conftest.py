import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mevi.eval.synthetic import SyntheticSpec, gen_synthetic
from mevi.model import MEVI

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=np.float32)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_synthetic(SyntheticSpec(n_docs=1000, dim=16, n_clusters_true=16, n_queries=50, seed=7))


@pytest.fixture(scope="session")
def default_corpus():
    return gen_synthetic(SyntheticSpec())


@pytest.fixture
def small_model(small_corpus):
    docs, _, _ = small_corpus
    return MEVI(n_layers=3, n_codewords=8, dense="exact").fit(docs.vectors, docs.ids)


@pytest.fixture(scope="session")
def default_model(default_corpus):
    docs, _, _ = default_corpus
    return MEVI(dense="hnsw").fit(docs.vectors, docs.ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# verdict lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
