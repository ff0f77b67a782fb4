"""Shared fixtures and the hypothesis profile for the suite."""

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """30-exam single_view dataset shared by data/training/CLI tests."""
    from mamt4 import data as dat

    root = tmp_path_factory.mktemp("tiny") / "single_view_30"
    dat.synth_generate(30, "single_view", 5, root)
    return root
