import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clindistil.models import ArchitectureDescriptor, build_model
from clindistil.text import MlmBatch
from clindistil.tensor import IGNORE_INDEX

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def toy_desc(vocab=30, hidden=8, layers=2, heads=2, **kw):
    kw.setdefault("max_positions", 16)
    kw.setdefault("dropout", 0.0)
    return ArchitectureDescriptor(vocab, hidden, layers, heads, **kw)


def scaled_model(desc, seed=0, scale=0.3):
    """float64 model with large random weights, so gradients are well away from zero."""
    model = build_model(desc, seed, np.float64)
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if name.endswith("gain"):
            p.data = 1.0 + 0.2 * rng.standard_normal(p.shape)
        elif name.endswith("bias"):
            p.data = 0.1 * rng.standard_normal(p.shape)
        else:
            p.data = scale * rng.standard_normal(p.shape)
    return model


def toy_batch(vocab, batch=2, length=6, seed=0, pad_last=2, mask_rate=0.4):
    """MLM batch whose last row is padded by ``pad_last`` positions."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, vocab, size=(batch, length))
    ids[:, 0] = 2
    mask = np.ones((batch, length), dtype=np.int64)
    if pad_last:
        mask[-1, length - pad_last:] = 0
        ids[-1, length - pad_last:] = 0
    labels = np.full((batch, length), IGNORE_INDEX, dtype=np.int64)
    pick = (rng.random((batch, length)) < mask_rate) & (mask == 1)
    pick[:, 0] = False
    pick[0, 1] = True
    labels[pick] = ids[pick]
    return MlmBatch(ids, labels, mask, np.zeros_like(ids))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdict lines ------------------------------------------------------------

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    number = int(request.node.name.split("_")[2])

    def record(ok, detail):
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[number])
        assert ok, detail

    yield record
    _VERDICTS.setdefault(number, f"criterion {number:2d}: FAIL  raised before a verdict was reached")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
