import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from longvtg.datastore import SynthSpec, corpus_instances, synthesize_corpus

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")

# property suites run this many cases where the check is cheap enough
THOROUGH = settings(max_examples=1000, deadline=None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    spec = SynthSpec(num_videos=4, video_length_features=300, dim=16, queries_per_video=2, noise_seed=7)
    return synthesize_corpus(spec)


@pytest.fixture(scope="session")
def small_instances(small_corpus):
    return corpus_instances(small_corpus)


@pytest.fixture(scope="session")
def trained():
    """A small pipeline trained on a separable corpus, plus held-out instances."""
    from longvtg.config import PipelineConfig
    from longvtg.training import train_models

    def instances(seed, n):
        spec = SynthSpec(num_videos=n, video_length_features=600, dim=32, noise_seed=seed)
        return corpus_instances(synthesize_corpus(spec))

    cfg = PipelineConfig.desk()
    adapter, scorer = train_models(instances(500, 24), cfg)
    return cfg, adapter, scorer, instances(501, 8)


# outcome of every test call in this session, for the invariant-suite criterion
SESSION_OUTCOMES: dict[str, str] = {}
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_collection_modifyitems(session, config, items):
    # acceptance criteria run last so they can see the other suites' outcomes
    items.sort(key=lambda item: "test_acceptance.py" in item.nodeid)


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        SESSION_OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
