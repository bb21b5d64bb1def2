"""Shared fixtures: shipped scenarios and small environments."""

from pathlib import Path

import numpy as np
import pytest

from cellfree_sleep.config import ScenarioConfig, load_scenario

INPUTS = Path(__file__).parent / "inputs"


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("CELLFREE_SEED", raising=False)


@pytest.fixture
def inputs_dir() -> Path:
    return INPUTS


@pytest.fixture
def smoke_cfg() -> ScenarioConfig:
    return load_scenario(INPUTS / "smoke")


@pytest.fixture
def week_cfg() -> ScenarioConfig:
    return load_scenario(INPUTS / "week")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def with_updates(cfg: ScenarioConfig, **sections) -> ScenarioConfig:
    """Copy of ``cfg`` re-validated with top-level or section overrides."""
    data = cfg.model_dump()
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return ScenarioConfig(**data)
