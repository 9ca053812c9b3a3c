import numpy as np
import pytest

from hdgkit.synth import SynthConfig, generate
from hdgkit.teacher import teacher_scores


@pytest.fixture(scope="session")
def desk12():
    """The default desk-scale fixture: 12 known / 4 unknown classes,
    4 domains, 20 samples per class per domain, dim 32, seed 42."""
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def desk12_scores(desk12):
    _, _, teacher_img, texts = desk12
    return teacher_scores(teacher_img, texts, lam=0.01)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
