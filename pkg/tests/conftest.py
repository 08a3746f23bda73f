import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from auxlatent.latent_model import LatentTransformer, ModelConfig
from auxlatent.taskgen import make_dataset

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=1, n_heads=2, latent_size=4, max_seq_len=128, d_vis=8, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return LatentTransformer(tiny_config())


@pytest.fixture(scope="session")
def small_tasks():
    return make_dataset(24, seed=11)


_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = f"({report.when} error)"
    _criteria[mark.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        status, detail = _criteria[key]
        terminalreporter.write_line(f"{key} {status} {detail}".rstrip())
