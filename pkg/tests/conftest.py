from __future__ import annotations

import numpy as np
import pytest

from contrastforge.dataio import RawInteractions, split_80_10_10


@pytest.fixture
def toy_raw() -> RawInteractions:
    """Six users over eight items, every user with at least four interactions."""
    records = []
    for u in range(6):
        for i in range(8):
            if (u + i) % 2 == 0 or i < 2:
                records.append((f"u{u}", f"i{i}", 1000 + 10 * u + i))
    return RawInteractions(records=records)


@pytest.fixture
def toy_dataset(toy_raw):
    return split_80_10_10(toy_raw, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
