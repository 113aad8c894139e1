"""Shared fixtures: tiny instances and small parameter sets."""

import numpy as np
import pytest

from mmhcvrp import GenConfig, Instance, ModelConfig, generate_many, init_parameters


@pytest.fixture
def tiny_instance() -> Instance:
    return generate_many(GenConfig(n_customers=6, n_vehicles=2), 1, base_seed=101)[0]


@pytest.fixture
def small_instances() -> list[Instance]:
    return generate_many(GenConfig(n_customers=8, n_vehicles=3), 4, base_seed=202)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(embed_dim=8, head_count=2, encoder_layers=2, knn_k=4)


@pytest.fixture
def tiny_params(tiny_model_config):
    return init_parameters(tiny_model_config, seed=31, dtype=np.float64)


@pytest.fixture
def tiny_params_f32(tiny_model_config):
    return init_parameters(tiny_model_config, seed=31, dtype=np.float32)


def make_line_instance(
    xs: list[float],
    demands: list[int],
    capacities: list[int],
    speeds: list[float],
    instance_id: str = "line",
) -> Instance:
    """Customers on the x axis with the depot at the origin; handy for
    hand-checkable objectives."""
    coords = np.array([[x, 0.0] for x in xs], dtype=np.float64)
    return Instance(
        depot=(0.0, 0.0),
        coords=coords,
        demands=np.array(demands, dtype=np.int64),
        capacities=np.array(capacities, dtype=np.int64),
        speeds=np.array(speeds, dtype=np.float64),
        id=instance_id,
        distribution="uniform",
    )
