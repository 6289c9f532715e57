import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from hashsdf.encoding import EncodingConfig
from hashsdf.field import FieldConfig, NeuralField
from hashsdf.synthetic import make_dataset

torch.set_num_threads(1)

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_ENCODING = EncodingConfig(levels=2, min_res=4, max_res=8, channels=2, table_size=512)


def tiny_field(seed=0, dtype=torch.float64, table_scale=0.1, **kw) -> NeuralField:
    """Small double-precision field with tables large enough to matter."""
    cfg = FieldConfig(encoding=kw.pop("encoding", TINY_ENCODING), sdf_hidden=kw.pop("hidden", 16),
                      feature_dim=kw.pop("feature_dim", 3), color_hidden=kw.pop("color_hidden", 16),
                      color_layers=kw.pop("color_layers", 2), **kw)
    field = NeuralField(cfg, seed).to(dtype)
    gen = torch.Generator().manual_seed(seed + 99)
    with torch.no_grad():
        field.grid.tables.copy_((torch.rand(field.grid.tables.shape, generator=gen,
                                            dtype=dtype) * 2 - 1) * table_scale)
    return field


def cell_interior_points(n, resolutions, seed=0, margin=0.05, clearance=0.0,
                         dtype=torch.float64):
    """Random points away from every level's cell faces.

    Each coordinate keeps at least ``margin`` (a fraction of the cell) and
    ``clearance`` (scene units) to the nearest face of every level.
    """
    gen = np.random.default_rng(seed)
    out, have = [], 0
    while have < n:
        x = gen.uniform(-0.9, 0.9, size=(4096, 3))
        ok = np.ones(len(x), dtype=bool)
        for v in resolutions:
            frac = ((x + 1) * v / 2) % 1.0
            gap = np.maximum(margin, clearance * v / 2)
            ok &= np.all((frac > gap) & (frac < 1 - gap), axis=1)
        out.append(x[ok])
        have += int(ok.sum())
    return torch.tensor(np.concatenate(out)[:n], dtype=dtype)


@pytest.fixture
def field64():
    return tiny_field()


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sphere_ds")
    return make_dataset("SPHERE", root, n_views=4, image_size=16, n_test=2, n_points=2000)


# --- acceptance summary ----------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "details": []})
    entry["outcomes"].append("skipped" if rep.skipped else rep.outcome)
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outs = entry["outcomes"]
        status = ("FAIL" if "failed" in outs else "SKIP" if "skipped" in outs else "PASS")
        detail = "; ".join(dict.fromkeys(entry["details"]))
        line = f"{status}  {number:2d}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
