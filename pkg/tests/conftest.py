import os

import pytest

from irforge.driver import find_clang, load_driver

CLANG = find_clang()

requires_clang = pytest.mark.skipif(CLANG is None, reason="no IR-capable clang installed; toolchain tests skipped")


@pytest.fixture(scope="session")
def clang_driver():
    if CLANG is None:
        pytest.skip("no IR-capable clang installed")
    return load_driver("clang:" + CLANG)


@pytest.fixture(scope="session")
def lulesh(tmp_path_factory, clang_driver):
    """LULESH-shaped project with its dedup result (shared by several modules)."""
    import projects
    from irforge.dedup import dedup

    project = projects.lulesh_project(str(tmp_path_factory.mktemp("lulesh")))
    plan, report = dedup(project.configs, clang_driver, jobs=os.cpu_count() or 1)
    return project, plan, report


ACCEPTANCE = {}  # criterion number -> (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status:4s} {detail}")
