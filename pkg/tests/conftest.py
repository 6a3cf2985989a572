import pytest

from uavlab.audio import synth_dataset
from uavlab.trainkit import FeatureSet


@pytest.fixture(scope="session")
def synth900():
    return synth_dataset(100, seed=0)


@pytest.fixture(scope="session")
def synth900_cnn(synth900):
    return FeatureSet.from_waveforms(synth900, "cnn")
