import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskdetect import asv, corpus

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    """Six speakers, six short utterances each; pools test/dev/asv of two speakers."""
    return corpus.make_corpus(11, {"test": 2, "dev": 2, "asv": 2}, 6, 0.6)


@pytest.fixture(scope="session")
def tiny_model():
    return asv.init_asv(3, asv.AsvArch(channels=6), asv.FeatureConfig(n_filters=10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting --------------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
