import numpy as np
import pytest

from contextflow import diffcore as dc
from contextflow.flowmodel import FlowConfig, FlowModel

_ACCEPTANCE: list[tuple[str, bool, str]] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _ACCEPTANCE.append((self.name, ok, detail))
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def randomize(model, scale=0.1, seed=0, namespaces=None):
    """Perturb every parameter so no layer sits at its identity init."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_params():
        if namespaces and p.namespace not in namespaces:
            continue
        p.data += scale * rng.standard_normal(p.shape)
    for layer in model.layers:
        if hasattr(layer, "initialized"):
            layer.initialized = 1.0


def rotation_context(n, k=8, seed=0):
    return {"rotation": np.random.default_rng(seed).integers(0, k, size=n)}


def small_model(shape=(4,), **kw) -> FlowModel:
    base = dict(input_shape=shape, blocks=2, sub_blocks=2, context=[dict(name="rotation", cardinality=8)],
                classes=2, components=2)
    base.update(kw)
    return FlowModel(FlowConfig(**base))


@pytest.fixture
def rng():
    return dc.make_rng(1234)
