import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import CHECKS, RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in CHECKS:
        if name in RESULTS:
            ok, detail = RESULTS[name]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
