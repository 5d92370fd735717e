import os

from threadpoolctl import threadpool_limits

# reference configuration: single-threaded BLAS
_limits = threadpool_limits(limits=int(os.environ.get("DINN_THREADS", "1")))

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
