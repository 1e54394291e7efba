import pytest

from stdrgs.config import Config
from stdrgs.scenes import SceneSpec, generate_scene

TINY_SCENE = SceneSpec(K=3, n_static=30, n_dynamic=8, n_cameras=4, n_heldout=1, width=16, height=16)


def tiny_config(**kw):
    base = dict(hidden_width=8, zs_dim=4, zt_dim=4, deform_layers=3, warm_up_end=3, reg_end=6, knn_k=3,
                kl_samples=6, knn_every=2, checkpoint_every=0, iterations=9)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_scene(TINY_SCENE)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag, status, detail in mod.RESULTS:
        terminalreporter.write_line(f"[{status}] {tag}: {detail}")
