import math

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def brute_softmax_attention(q, k, v):
    """Nested-loop softmax attention over plain Python floats; q, k, v are 2-D."""
    q, k, v = (np.asarray(t, dtype=np.float64).tolist() for t in (q, k, v))
    d = len(q[0])
    out = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        m = max(logits)
        w = [math.exp(s - m) for s in logits]
        z = sum(w)
        out.append([sum(w[j] / z * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return np.array(out)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
