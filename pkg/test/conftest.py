import numpy as np
import pytest

from src.channel import ArrayConfig, generate_scene
from src.codebook import dft_codebook
from src.data_utils import BeamDataset, MeasurementConfig, Origin, Split, build_dataset
from src.mlp import MlpModel


@pytest.fixture
def array_cfg():
    return ArrayConfig(n_bs=32)


@pytest.fixture
def sensing(array_cfg):
    return dft_codebook(array_cfg, oversampling=1)


@pytest.fixture
def candidates(array_cfg):
    return dft_codebook(array_cfg, oversampling=4)


@pytest.fixture
def measurement():
    return MeasurementConfig()


@pytest.fixture
def scene(array_cfg):
    return generate_scene(40, array_cfg, seed=3, los_fraction=0.5)


@pytest.fixture
def beam_dataset(scene, sensing, candidates, measurement, array_cfg):
    return build_dataset(
        scene, sensing, candidates, measurement, 300, Origin.TWIN, seed=11, cfg=array_cfg
    )


def clustered_dataset(n_per_class=60, n_features=4, n_classes=4, spread=0.3, seed=0, split=None):
    """Well separated gaussian clusters: class c sits at 5 * e_c."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    centers = 5.0 * np.eye(n_classes, n_features)
    features = centers[labels] + spread * rng.standard_normal((len(labels), n_features))
    order = rng.permutation(len(labels))
    return BeamDataset.from_arrays(
        features[order], labels[order], split=None if split is None else split, n_classes=n_classes
    )


@pytest.fixture
def toy_dataset():
    return clustered_dataset()


@pytest.fixture
def split_toy_dataset():
    """Clusters with train / holdout / test rows drawn from the same distribution."""
    n = 3 * 1000
    rng = np.random.default_rng(5)
    split = rng.choice([Split.TRAIN, Split.HOLDOUT, Split.TEST], size=n, p=[0.5, 0.25, 0.25])
    return clustered_dataset(n_per_class=1000, n_features=6, n_classes=3, spread=2.0, seed=5, split=split)


@pytest.fixture
def small_model():
    return MlpModel.initialize(6, n_classes=8, hidden=(16, 12), seed=1)
