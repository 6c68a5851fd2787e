import importlib.util
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

# criterion number -> outcome list, filled by tests marked ``criterion(n)``
_OUTCOMES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion n")


@pytest.fixture(scope="session")
def mnist_dir():
    if not all((MNIST_DIR / f).exists() for f in MNIST_FILES):
        if importlib.util.find_spec("mlxtend") is None:
            pytest.skip("no MNIST IDX files and mlxtend is not installed")
        subprocess.run([sys.executable, str(ROOT / "scripts" / "make_mnist_idx.py"), "--out", str(MNIST_DIR)], check=True)
    return MNIST_DIR


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        _OUTCOMES.setdefault(marker.args[0], []).append((item.name, ok))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        rows = _OUTCOMES[n]
        status = "PASS" if all(ok for _, ok in rows) else "FAIL"
        failed = [name for name, ok in rows if not ok]
        extra = f" ({', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n}: {status}{extra}")
