"""Session-wide fixtures: the frozen synthetic panel shared across modules."""

import pytest

from credit_migration.data import preprocess
from credit_migration.synthetic import generate_synthetic

FIXTURE_COMPANIES = 400
FIXTURE_QUARTERS = 40
FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def fixture_rows():
    """The frozen benchmark panel: 400 companies x 40 quarters, seed 7."""
    return generate_synthetic(FIXTURE_COMPANIES, FIXTURE_QUARTERS, FIXTURE_SEED)


@pytest.fixture(scope="session")
def fixture_samples(fixture_rows):
    """Fixture rows preprocessed at the default 12-month gap."""
    return preprocess(fixture_rows, gap_months=12, seq_len=4).samples
