from hypothesis import HealthCheck, settings

# wall-clock deadlines are meaningless on a shared single-core runner
settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

import re
from pathlib import Path

import pytest

PAPER = Path(__file__).resolve().parents[1] / "paper.md"
_LISTING = "\\begin{mdframed}\\begin{lstlisting}"
_ESCAPES = re.compile(r"\\([{}&^$#_%])")


def _clean_listing(line: str) -> str:
    body = line.split("\\end{lstlisting}")[0]
    return _ESCAPES.sub(r"\1", body.replace("|r|", "")).rstrip()


@pytest.fixture(scope="session")
def listings():
    """Texts of the three printed decoder listings: reference, geometry-aware run, baseline run."""
    if not PAPER.exists():
        pytest.skip("paper.md not available")
    lines = PAPER.read_text(encoding="utf-8").splitlines()
    blocks = [_clean_listing(lines[i + 1]) for i, ln in enumerate(lines[:-1]) if ln.strip() == _LISTING]
    if len(blocks) < 2:
        pytest.skip("decoder listings not found in paper.md")
    return blocks


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number: int, title: str, checks: dict, detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" [{detail}]"
        if failed:
            line += f" failed checks: {', '.join(failed)}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
