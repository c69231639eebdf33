import numpy as np
import pytest

from spacebond.neural import TrainConfig
from spacebond.synth import SpaceSpec, generate_world, realize_space


@pytest.fixture(scope="session")
def mini_world():
    return generate_world(240, 16, 7)


@pytest.fixture(scope="session")
def mini_spaces(mini_world):
    """Small unified + expert spaces for bond-level tests."""
    unified = realize_space(
        mini_world,
        SpaceSpec(
            "unified", 24, ("audio", "image", "text"),
            {"audio": 2.0, "image": 1.0, "text": 1.0}, seed=11,
        ),
    )
    vt = realize_space(
        mini_world,
        SpaceSpec("vt_expert", 20, ("image", "text"), {"image": 0.6, "text": 0.6}, seed=12),
    )
    at = realize_space(
        mini_world,
        SpaceSpec(
            "at_expert", 18, ("audio", "text"),
            {"audio": 0.5, "text": 1.2}, seed=13, shared_shift=0.5,
        ),
    )
    return {"unified": unified, "vt_expert": vt, "at_expert": at}


@pytest.fixture(scope="session")
def mini_train_cfg():
    return TrainConfig(epochs=2, batch_size=60, hidden=32, seed=5)


@pytest.fixture(scope="session")
def mini_indices():
    return np.arange(180), np.arange(180, 240)
