import numpy as np
import pytest

from tshap.data import FeatureSequence, GeneratorConfig, generate_dataset, preprocess
from tshap.models import LstmParameters, ModelConfig, TrainedModel

_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    details = [v for k, v in item.user_properties if k == "detail"]
    _VERDICTS[marker.args[0]] = ("PASS" if rep.passed else "FAIL", "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_lstm(d=75, h=4, C=4, seed=0, T=10) -> TrainedModel:
    params = LstmParameters.init(d, h, C, np.random.default_rng(seed))
    return TrainedModel("lstm", params, ModelConfig(d=d, h=h, C=C, T=T))


@pytest.fixture
def small_model():
    return tiny_lstm()


@pytest.fixture
def small_sequence(rng):
    return FeatureSequence(rng.normal(size=(10, 75)), label=1, subject_id=0, seq_id=7)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GeneratorConfig(seed=3, n_per_class=4, n_subjects=4, raw_length_range=(30, 40))
    return [preprocess(s, 20) for s in generate_dataset(cfg)]
