def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # release-gate lines registered by test_acceptance, one per criterion
    try:
        from acceptance_utils import GATE_LINES
    except ImportError:
        return
    if GATE_LINES:
        terminalreporter.section("release gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
