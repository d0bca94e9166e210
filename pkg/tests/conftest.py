"""Shared fixtures: bundled fixture paths and a small synthetic corpus."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from xrecap.corpus import SyntheticSpec, generate_synthetic

TESTS_DIR = Path(__file__).parent


@pytest.fixture(scope="session")
def bundled_fixtures() -> Path:
    return Path(str(resources.files("xrecap"))) / "fixtures"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return TESTS_DIR / "golden"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return TESTS_DIR / "fixtures"


@pytest.fixture(scope="session")
def synthetic_corpus():
    """Default desk-scale corpus: 4 concepts x 32 images, dim 16."""
    spec = SyntheticSpec(
        num_concepts=4, images_per_concept=32, dim=16,
        shift_magnitude=0.8, noise_sigma=0.1, seed=7,
    )
    return generate_synthetic(spec)
