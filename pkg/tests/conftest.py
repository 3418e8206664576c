import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spatial_lab.numerics import Mlp, RngStream, init_mlp

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def central_fd(f, arrays: list[np.ndarray], h: float = 1e-5, coords=None) -> list[np.ndarray]:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of
    ``arrays`` (mutated in place and restored).  ``coords`` limits the
    evaluated entries to a list of ``(array index, flat index)``."""
    out = [np.full(a.shape, np.nan) for a in arrays]
    todo = coords if coords is not None else [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    for i, j in todo:
        flat = arrays[i].reshape(-1)
        keep = flat[j]
        flat[j] = keep + h
        up = f()
        flat[j] = keep - h
        down = f()
        flat[j] = keep
        out[i].reshape(-1)[j] = (up - down) / (2 * h)
    return out


def rel_err(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-300))


@pytest.fixture
def small_net() -> Mlp:
    return init_mlp([5, 8, 6, 3], RngStream(7, 1))


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """800 train / 500 eval pairs, built once per session."""
    from spatial_lab.forge import ForgeConfig, build_dataset, load_pairs

    out = tmp_path_factory.mktemp("toy")
    paths, manifest = build_dataset(ForgeConfig(train_n=800, eval_n=500), 5, out, threads=min(4, os.cpu_count() or 1))
    return {"dir": out, "train": load_pairs(paths["train"]), "eval": load_pairs(paths["eval"]), "manifest": manifest}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
