import numpy as np
import pytest

from landmark_rerank.embedding_store import EmbeddingSet

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Collects one line per acceptance criterion for the terminal summary."""
    def _record(name, passed, detail=""):
        _ACCEPTANCE.append((name, passed, detail))
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def make_set(rows, prefix="x", labels=None, normalize=True):
    rows = np.asarray(rows, dtype=np.float64)
    ids = [f"{prefix}{i}" for i in range(len(rows))]
    lab = None if labels is None else dict(zip(ids, labels))
    return EmbeddingSet.from_arrays(rows, ids, lab, normalize=normalize)


def random_set(rng, n, dim, prefix="x", labels=None):
    return make_set(rng.standard_normal((n, dim)), prefix, labels)
