import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def conv2d_reference(x, k, b, stride, pad):
    """Nested-loop cross-correlation with zero padding."""
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[f, c, u, v]
                    out[n, f, i, j] = acc + (b[f] if b is not None else 0.0)
    return out


def haar_reference(img):
    """Direct 2x2-block evaluation of the orthonormal Haar analysis formulas."""
    C, H, W = img.shape
    bands = {k: np.zeros((C, H // 2, W // 2)) for k in ("ll", "lh", "hl", "hh")}
    for c in range(C):
        for i in range(H // 2):
            for j in range(W // 2):
                a, b = img[c, 2 * i, 2 * j], img[c, 2 * i, 2 * j + 1]
                cc, d = img[c, 2 * i + 1, 2 * j], img[c, 2 * i + 1, 2 * j + 1]
                bands["ll"][c, i, j] = (a + b + cc + d) / 2
                bands["lh"][c, i, j] = (a + b - cc - d) / 2
                bands["hl"][c, i, j] = (a - b + cc - d) / 2
                bands["hh"][c, i, j] = (a - b - cc + d) / 2
    return bands


# acceptance reporting ----------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``record(n, passed, detail)`` stores and prints one line per acceptance criterion."""
    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE[n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
