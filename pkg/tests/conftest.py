"""Shared fixtures: desk-scale network shapes and seeded random bundles."""
import numpy as np
import pytest

from diracdelta.bundle import random_bundle
from diracdelta.net import NetworkSpec
from diracdelta.quant import NetworkQuantParams
from diracdelta.tensor import FeatureMap


def make_tiny_spec(**overrides) -> NetworkSpec:
    """One-stage, one-repeat network small enough to run in milliseconds."""
    base = dict(
        input_size=16,
        input_channels=3,
        stem_channels=(4, 8),
        stage_channels=(16,),
        stage_repeats=(1,),
        conv5_channels=32,
        num_classes=10,
    )
    base.update(overrides)
    return NetworkSpec(**base)


def make_two_stage_spec() -> NetworkSpec:
    return NetworkSpec(
        input_size=32,
        input_channels=3,
        stem_channels=(4, 8),
        stage_channels=(16, 32),
        stage_repeats=(1, 2),
        conv5_channels=64,
        num_classes=12,
    )


def random_input(spec: NetworkSpec, seed: int) -> FeatureMap:
    rng = np.random.default_rng(seed)
    arr = rng.integers(
        0, 16, size=(spec.input_size, spec.input_size, spec.input_channels), dtype=np.uint8
    )
    return FeatureMap.from_array(arr)


@pytest.fixture
def quant_params() -> NetworkQuantParams:
    return NetworkQuantParams(s=1.0, k_w=4, k_a=4)


@pytest.fixture
def tiny_spec() -> NetworkSpec:
    return make_tiny_spec()


@pytest.fixture
def tiny_bundle(tiny_spec, quant_params):
    return random_bundle(tiny_spec, quant_params, seed=11)
