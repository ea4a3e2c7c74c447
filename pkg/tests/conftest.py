import pytest

from kgvl.kb import kb_from_text

from helpers import CHURCH_TSV


@pytest.fixture
def church_kb():
    return kb_from_text(CHURCH_TSV)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
