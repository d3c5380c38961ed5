import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvcl.data import SynthConfig, generate_synthetic
from mvcl.pipeline import ModelConfig, StagePlan, StageSettings

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_synth():
    """Small but separable dataset shared by pipeline-level tests."""
    cfg = SynthConfig(train_samples=120, val_samples=48, test_samples=48, seed=23)
    return cfg, generate_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_model_config(tiny_synth):
    cfg, _ = tiny_synth
    return ModelConfig.for_preset("desk", cfg.header("train"))


@pytest.fixture(scope="session")
def short_plan():
    return StagePlan(
        stage1=StageSettings(epochs=2),
        stage2=StageSettings(epochs=2),
        stage3=StageSettings(epochs=2),
        classifier=StageSettings(epochs=3),
    )
