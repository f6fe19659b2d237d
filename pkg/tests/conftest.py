import numpy as np
import pytest

from segan.data import SynthSpec, gen_synthetic
from segan.training import TrainConfig


def tiny_synth(**kw) -> SynthSpec:
    base = dict(image_size=20, depth=3, outer_radius=(4.0, 6.0), depth_radius=(1.0, 2.0),
                train_volumes=3, val_volumes=1, test_volumes=1, seed=5)
    base.update(kw)
    return SynthSpec(**base)


def tiny_config(**kw) -> TrainConfig:
    base = dict(batch_size=4, lr=1e-3, max_iters=3, base_feature_maps=4, crop_size=16, eval_every=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_synth")
    gen_synthetic(tiny_synth(), out)
    return out


# criterion number -> (title, passed, detail); filled by the acceptance suite.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
