import os

import torch

# one core in CI; keeps timings and results stable
torch.set_num_threads(int(os.environ.get("BLINK_TEST_THREADS", "1")))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
