import numpy as np
import pytest
import torch

from palletmask.core import BoxDims, PalletConfig
from palletmask.env import NoiseConfig, ScenarioConfig

torch.set_num_threads(1)


@pytest.fixture
def small_scenario():
    return ScenarioConfig(
        box_catalog=(BoxDims(4, 3, 2), BoxDims(3, 2, 2), BoxDims(2, 2, 2)),
        episode_box_count=12,
        buffer_capacity=2,
        pallet=PalletConfig(8, 8, 8),
    )


@pytest.fixture
def zero_noise():
    return NoiseConfig(translational_std=0.0, rotational_std_deg=0.0, samples_per_check=1, stable_fraction_threshold=1.0)


def state_with_heights(heights, boxes=(BoxDims(4, 4, 4),), pallet=None, placed=()):
    """EnvState with an arbitrary heightmap and no physical stack behind it (heuristic tests only)."""
    from palletmask.env import EnvState

    heights = np.asarray(heights, dtype=np.int64)
    pallet = pallet or PalletConfig(heights.shape[0], heights.shape[1], 25)
    return EnvState(heights=heights, buffer=tuple(boxes), stream=(), placed=tuple(placed), pallet=pallet)


# criterion name -> (passed, detail); filled by test_acceptance.py and echoed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")
