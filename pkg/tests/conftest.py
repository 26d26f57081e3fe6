import os

import pytest

from dam.synthetic import write_fixture


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return write_fixture(tmp_path_factory.mktemp("fixture"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DAM_EXTENDED") == "1":
        return
    skip = pytest.mark.skip(reason="extended run; set DAM_EXTENDED=1")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def training_data(fixture_dir):
    from dam.ingestion import discourse_path, load_discourse_corpus, load_ecec_dataset
    from dam.trainer import TrainingData

    return TrainingData(
        load_ecec_dataset(fixture_dir, "train"),
        load_ecec_dataset(fixture_dir, "validation"),
        load_discourse_corpus(discourse_path(fixture_dir, "train")),
        load_ecec_dataset(fixture_dir, "test"),
    )


_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:4} {name}")
