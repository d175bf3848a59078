import numpy as np
import pytest

from rankdehaze.forest import ForestConfig, fit_forest
from rankdehaze.network import build_network, train
from rankdehaze.nn import TrainConfig
from rankdehaze.synth import (build_dataset, make_procedural_images,
                              sample_clear_patches)


@pytest.fixture(scope="session")
def tiny_dataset():
    """4k-sample corpus; big enough for a usable model, small enough for CI."""
    images = make_procedural_images(40, size=48, seed=5)
    patches = sample_clear_patches(images, 400, rng=6)
    return build_dataset(patches, per_patch=10, rng=7)


@pytest.fixture(scope="session")
def trained_tiny(tiny_dataset):
    """(network, forest) trained for a few epochs; mechanics-quality, not benchmark-quality."""
    net = build_network("pool1", seed=1)
    net, _ = train(net, tiny_dataset, TrainConfig(epochs=4, rng_seed=1))
    x = tiny_dataset.hazy
    feats = np.concatenate([net.features(x[s:s + 1024])
                            for s in range(0, len(x), 1024)])
    forest = fit_forest(feats[:3000], tiny_dataset.t[:3000],
                        ForestConfig(n_trees=30, seed=1), threads=2)
    return net, forest
