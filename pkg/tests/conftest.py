import numpy as np
import pytest
import torch

from layerwise.field import GridSpec, MlpSpec, init_field
from layerwise.scene import AABB, default_scene, parse_scene

SMALL_GRID = GridSpec(levels=4, features=2, table_size=2**8, n_min=4, n_max=16)
SMALL_MLP = MlpSpec(hidden=(16, 16))


def small_field(aabb=AABB((-0.6,) * 3, (0.6,) * 3), seed=0, dtype=torch.float64, spread=0.5):
    """A tiny hash-grid field with non-trivial hash entries."""
    f = init_field(SMALL_GRID, SMALL_MLP, aabb, seed=seed, dtype=dtype)
    if spread:
        gen = torch.Generator().manual_seed(seed + 1000)
        with torch.no_grad():
            f.grid.table.uniform_(-spread, spread, generator=gen)
    return f


def toy_scene_doc(body=((-0.6,) * 3, (0.6,) * 3), garments=()):
    doc = default_scene().to_dict()
    doc["layers"] = [{"name": "body", "cloth_phrase": "", "aabb": {"min": list(body[0]), "max": list(body[1])}}]
    for name, phrase, lo, hi in garments:
        doc["layers"].append({"name": name, "cloth_phrase": phrase, "aabb": {"min": list(lo), "max": list(hi)}})
    doc["skeleton"] = [{"name": "top", "pos": [0.0, 0.4, 0.0]}, {"name": "bottom", "pos": [0.0, -0.4, 0.0]}]
    doc["bones"] = [[0, 1]]
    return doc


def toy_scene(**kw):
    return parse_scene(toy_scene_doc(**kw))


@pytest.fixture
def scene_doc():
    return default_scene().to_dict()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
