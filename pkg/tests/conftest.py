ACCEPTANCE_LINES = {}


def record_acceptance(number, title, passed, detail=""):
    """Store and print one acceptance line; the summary hook repeats them."""
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number:>2}: {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
