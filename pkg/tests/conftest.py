import contextlib
import io
import sys
import time

import numpy as np
import pytest
from hypothesis import settings

from cldtrack.encoders import StubBackend

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def backend():
    return StubBackend(dim=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, q):
    x = rng.normal(size=(n, q))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def full_demo(tmp_path_factory):
    """The default demo, run once: (output dir, exit code, wall seconds, stdout)."""
    from cldtrack.cli import main

    out = tmp_path_factory.mktemp("full_demo") / "run"
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["demo", "--out", str(out)], environ={})
    return out, code, time.perf_counter() - t0, buf.getvalue()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
