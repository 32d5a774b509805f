import numpy as np
import pytest
import torch

from occ4cast import config as config_mod
from occ4cast.synthetic import SyntheticWorldSpec, generate_synthetic_sequence


def tiny_world_spec(**overrides):
    """Small, fast world used across the unit tests."""
    from occ4cast.synthetic import CameraRigSpec

    base = dict(
        bounds=((-8.0, -8.0, 0.0), (8.0, 8.0, 4.0)),
        grid_dims=(16, 16, 4),
        voxel_size=1.0,
        n_static=3,
        n_dynamic=1,
        n_past=1,
        n_future=3,
        rig=CameraRigSpec(yaws_deg=(0.0, 50.0, -50.0), width=48, height=32),
        path_family="left-turn",
    )
    base.update(overrides)
    return SyntheticWorldSpec(**base)


def tiny_model_config(**overrides):
    import dataclasses

    from occ4cast.anchors import AnchorConfig
    from occ4cast.backbone import BackboneConfig
    from occ4cast.fusion import WorldModelConfig
    from occ4cast.sampler import SamplerConfig

    cfg = WorldModelConfig(
        dim=16, heads=2, blocks=2, t_max=3, t_prime=1,
        anchor=AnchorConfig(num_anchors=8, points_per_anchor=4, feature_dim=16,
                            sigma=0.2, bounds=((-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))),
        sampler=SamplerConfig(backbone=BackboneConfig(widths=(4, 6, 8, 12))),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


@pytest.fixture(scope="session")
def tiny_sample():
    return generate_synthetic_sequence(tiny_world_spec(), seed=11)


@pytest.fixture(scope="session")
def tiny_model():
    from occ4cast.fusion import OccupancyWorldModel

    torch.manual_seed(0)
    return OccupancyWorldModel(tiny_model_config())


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
