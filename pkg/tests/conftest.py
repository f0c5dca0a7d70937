import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hierdet import dataio


@pytest.fixture(scope="session")
def acceptance_data():
    """The fixed desk-scale benchmark dataset shared by the suite."""
    cfg = dataio.acceptance_config(seed=42)
    train, test, truth = dataio.generate_synthetic(cfg)
    return cfg, train, test, truth


def small_config(seed=0, **overrides):
    """A fast synthetic configuration for unit tests."""
    kwargs = dict(num_categories=4, shots_per_category=3, feature_dim=12,
                  cluster_separation=6.0, within_cluster_std=1.0,
                  proposals_per_object=2, background_proposals_per_image=2,
                  seed=seed, num_base=2, child_ratio=0.5)
    kwargs.update(overrides)
    return dataio.SyntheticConfig(**kwargs)
