def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" in rep.nodeid:
                mark = "PASS" if status == "passed" else "FAIL"
                lines.append(f"[{mark}] {rep.nodeid.split('::')[-1]}")
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria (secondary):")
        for ln in sorted(lines):
            terminalreporter.write_line("  " + ln)
