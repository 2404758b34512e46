from __future__ import annotations

import numpy as np
import pytest

from voxrecon.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def brute_block_means(img, f):
    c, h, w = img.shape
    out = np.zeros((c, h // f, w // f))
    for ch in range(c):
        for i in range(h // f):
            for j in range(w // f):
                total = 0.0
                for a in range(f):
                    for b in range(f):
                        total += img[ch, i * f + a, j * f + b]
                out[ch, i, j] = total / (f * f)
    return out


def brute_conv3x3(x, k):
    """Replicate-padded cross-correlation, one pixel at a time."""
    h, w = x.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(3):
                for b in range(3):
                    ii = min(max(i + a - 1, 0), h - 1)
                    jj = min(max(j + b - 1, 0), w - 1)
                    s += k[a][b] * x[ii, jj]
            out[i, j] = s
    return out


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
