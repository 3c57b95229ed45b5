import numpy as np
import pytest

from sideseg.model import GatedSegModel, ModelConfig
from sideseg.synth import extract_patches, generate_scene, simulate_strokes


def tiny_config(**overrides):
    base = dict(num_classes=3, side_channels_raw=3, d=4, n=2,
                backbone_channels=8, num_gated_blocks=2, dilations=(1, 2),
                target_rate=0.6, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return GatedSegModel(tiny_config())


@pytest.fixture(scope="session")
def toy_sets():
    """Two small scenes with stroke annotations, for trainer/eval tests."""
    sets = []
    for seed in (31, 32):
        scene = generate_scene(64, 64, 3, seed=seed)
        aset = simulate_strokes(scene, seed=seed + 100, min_region_area=48)
        sets.append((scene, aset))
    return sets


@pytest.fixture(scope="session")
def toy_patches(toy_sets):
    patches = []
    for scene, aset in toy_sets:
        patches.extend(extract_patches(scene, aset, patch_size=32, stride=32,
                                       ignore_threshold=1.0))
    return patches


@pytest.fixture(scope="session")
def toy_train_rig(toy_sets, toy_patches):
    """(train_patches, val_scene_sets) split over the two toy scenes."""
    train = [p for p in toy_patches]
    val = [toy_sets[1]]
    return train, val
