import pytest

from touchspot.core import desk_config
from touchspot.synth import SynthParams, generate_dataset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny_items():
    return generate_dataset(6, SynthParams(seed=3, id_prefix="tiny"))


@pytest.fixture(scope="session")
def tiny_data(tiny_items):
    anns = [a for a, _ in tiny_items]
    frames = {a.video_id: f for a, f in tiny_items}
    return anns, frames


@pytest.fixture
def tiny_cfg():
    return desk_config(epochs=2, clips_per_epoch=16, batch_size=4, feature_dim=16, backbone_width=8)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
