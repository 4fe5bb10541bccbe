import numpy as np
import pytest

from cbpnet.backbone import Backbone, BackboneConfig, FrozenStore
from cbpnet.numeric import Rng


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(image_size=8, patch_size=4, channels=1, depth=3,
                          dim=8, heads=2, mlp_ratio=2.0)


@pytest.fixture
def tiny_backbone(tiny_cfg):
    store = FrozenStore(tiny_cfg, Rng(0).child("backbone"))
    return Backbone(store)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(42).uniform(-1, 1, (3, 8, 8, 1))
