import pytest

from oodbatch.data import SynthConfig, generate_synthetic

DATASET_NAMES = ("NIH", "CHEX", "MIMIC", "PC")

_acceptance: list[tuple[str, str]] = []


@pytest.fixture(scope="session")
def four_envs():
    cfg = SynthConfig(n_envs=4, n_per_env=200, names=DATASET_NAMES, seed=11, missing_rate=0.1)
    return {m.name: (m, p) for m, p in generate_synthetic(cfg)}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (rep.when == "call" or rep.failed):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        if hasattr(item, "callspec"):
            doc += f" [{item.callspec.id}]"
        status = "PASS" if rep.passed else "FAIL"
        _acceptance.append((status, doc))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for status, doc in _acceptance:
        terminalreporter.write_line(f"{status}  {doc}")
