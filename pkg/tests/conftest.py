import glob
import sysconfig

import numpy as np
import pytest

from subpipe.model import ModelDims

DESK = ModelDims(d=64, d_ff=256, heads=4, layers=4, vocab=256, n_max=32, k=8)
TINY = ModelDims(d=8, d_ff=16, heads=2, layers=2, vocab=11, n_max=3, k=2)


def stdlib_text(min_bytes):
    """Concatenated standard-library sources: a deterministic local text corpus."""
    data = bytearray()
    for path in sorted(glob.glob(sysconfig.get_paths()["stdlib"] + "/*.py")):
        with open(path, "rb") as fh:
            data += fh.read()
        if len(data) >= min_bytes:
            return bytes(data)
    raise RuntimeError("standard library sources are too small for a corpus")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "stdlib.txt"
    path.write_bytes(stdlib_text(1_100_000))
    return str(path)


VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
