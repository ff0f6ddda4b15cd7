"""Shared fixtures and the acceptance summary hook.

The acceptance tests append one line per criterion via record_criterion;
pytest prints the collected lines in their own section at the end of the
run so the verdicts are visible without -s.
"""

import pytest

from heightfuse.network import NetworkConfig
from heightfuse.sim import (DatasetParams, SceneParams, build_dataset,
                            generate_scene)

ACCEPTANCE_LINES = []


def record_criterion(num: int, ok: bool, text: str) -> None:
    word = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append((num, "criterion %2d  %s  %s" % (num, word, text)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


# small network shapes used across the unit tests; image_size=64 matches the
# stored dataset frames, the 16px variant keeps pure-graph tests fast
def tiny_config(mode: str, image_size: int = 64) -> NetworkConfig:
    return NetworkConfig(mode=mode, channels=4, directions=8, max_keypoints=10,
                         map_size=20, image_size=image_size)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(7, SceneParams(size=40, object_count=6))


SMALL_DATA_SEED = 1
SMALL_DATA_PARAMS = DatasetParams(
    train_scenes=2, test_scenes=1,
    episodes_per_train_scene=2, episodes_per_test_scene=2,
    t_len=3, window=20, keypoint_count=8,
    keypoint_noise=0.5, outlier_rate=0.1,
    corruption_levels=(0.0, 0.4),
    scene=SceneParams(size=48, object_count=6))


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """(root, meta) for a six-episode dataset shared across test modules."""
    root = tmp_path_factory.mktemp("data")
    meta = build_dataset(str(root), seed=SMALL_DATA_SEED,
                         params=SMALL_DATA_PARAMS)
    return str(root), meta
