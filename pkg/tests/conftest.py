import pytest

from cantor_prufer import cli
from cantor_prufer.construction import builtin_profile, run_construction, run_wvn

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_cfg():
    return builtin_profile("default")


@pytest.fixture(scope="session")
def wvn_run(default_cfg):
    return run_wvn(default_cfg)


@pytest.fixture(scope="session")
def split_run(default_cfg):
    state, reports = run_construction(default_cfg, max_stage=1)
    return state, reports[0]


@pytest.fixture(scope="session")
def two_stage(tmp_path_factory):
    """The two-stage construction, run once through the CLI (about 80 s)."""
    out = tmp_path_factory.mktemp("two_stage")
    res = cli.run(["construct", "--profile", "two-stage", "--stages", "2", "--out", str(out),
                   "-q"])
    return res


@pytest.fixture
def acceptance_line():
    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
