from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import acceptance_report
from cdnrec.datasets import InteractionLog, ItemFeature, prepare_split, synth_zipf
from cdnrec.model import ItemTowerConfig, UserTowerConfig
from cdnrec.training import PreparedData

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL_ITEM = ItemTowerConfig(expert_hidden_dims=(6,), embedding_dim=4, output_dim=3)
SMALL_USER = UserTowerConfig(shared_dims=(5, 5), branch_dims=(4,), embedding_dim=4, output_dim=3)


def make_log(users, items, n_users, n_items, genres=None, timestamps=None) -> InteractionLog:
    """Log over integer ids; ``genres`` is one list of genre names per item."""
    users = np.asarray(users, dtype=np.int64)
    if genres is None:
        genres = [[f"g{i % 3}"] for i in range(n_items)]
    if timestamps is None:
        timestamps = np.arange(len(users))
    return InteractionLog(
        users,
        np.asarray(items, dtype=np.int64),
        np.asarray(timestamps, dtype=np.int64),
        np.ones(len(users), dtype=np.int8),
        tuple(range(n_users)),
        tuple(range(n_items)),
        {"genre": ItemFeature.from_lists("genre", genres)},
    )


@pytest.fixture(scope="session")
def tiny_data() -> PreparedData:
    log = synth_zipf(60, 40, 1.0, 900, 4, seed=3)
    split, stats = prepare_split(log, 0.2, seed=3)
    return PreparedData(split, stats)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_report.LINES):
        terminalreporter.write_line(acceptance_report.LINES[n])
