import pytest

from citympc.pipeline import BuildConfig, build_dataset
from citympc.scene import SceneConfig

SMALL_SCENE_SEED = 5
SMALL_SPLIT_SEED = 7
SMALL_SCENE_CFG = SceneConfig(n_buildings=6)
SMALL_BUILD_CFG = BuildConfig(n_tx=3, rx_pitch_m=60.0, rx_blocks_per_side=3)


@pytest.fixture(scope="session")
def small_build():
    """A fast end-to-end dataset (~30 links) shared across test modules."""
    return build_dataset(SMALL_SCENE_SEED, SMALL_SCENE_CFG, SMALL_BUILD_CFG,
                         split_seed=SMALL_SPLIT_SEED)
