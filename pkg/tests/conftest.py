import numpy as np
import pytest

from redcount import kernels

BACKENDS = ["numpy"] + (["numba"] if kernels.numba_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.backend_name()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_conv(x, w, b=None, pad=0):
    """Direct-loop cross-correlation, the reference for every conv test."""
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    bn, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((bn, o, h - k + 1, wd - k + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = x[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.einsum("bckl,ockl->bo", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; echoed at session end."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
