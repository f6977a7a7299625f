import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def warm_run():
    """Default synthetic corpus (seed 0) and the state after a full warm-up."""
    from rankem.data import SyntheticCorpusSpec, generate, training_streams
    from rankem.trainer import TrainConfig, train

    spec = SyntheticCorpusSpec()
    corpus = generate(spec, 0)
    parallel, mono = training_streams(corpus)
    cfg = TrainConfig.desk(seed=0, vocab_size=spec.vocab_size, num_languages=spec.num_languages)
    state = train(cfg, parallel, mono, stop_after=cfg.phase1_steps)
    return corpus, state


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion; printed in the terminal summary."""
    def record(criterion: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append((criterion, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
