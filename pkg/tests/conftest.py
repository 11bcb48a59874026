"""Shared pytest wiring: one summary line per acceptance criterion."""
import re

_CRIT = re.compile(r"test_acceptance\.py::test_(a\d+)_")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and outcome == "passed"):
                continue
            crit = m.group(1).upper()
            detail = "; ".join(str(v) for k, v in getattr(rep, "user_properties", []) if k == "detail")
            verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
            # a setup error and a later call report can both exist; keep the worst
            if lines.get(crit, ("PASS",))[0] == "FAIL":
                continue
            lines[crit] = (verdict, detail)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(lines, key=lambda c: int(c[1:])):
        verdict, detail = lines[crit]
        terminalreporter.write_line(f"{crit:<4} {verdict}  {detail}")
