import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo one pass/fail line per acceptance criterion after the run."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(results):
        tag = "PASS" if ok else "FAIL"
        line = f"[{tag}] {num:2d}. {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line, green=ok, red=not ok)
