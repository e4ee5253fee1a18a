import json
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

from rollcast.panel import PanelDataset


def make_panel(T=20, n=3, frequency="daily", start=date(2021, 1, 4), fill=None, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(1, 50, size=(T, n)) if fill is None else np.full((T, n), float(fill))
    step = timedelta(days=1 if frequency == "daily" else 7)
    dates = tuple(start + step * t for t in range(T))
    regions = tuple(f"r{i}" for i in range(n))
    return PanelDataset(dates, regions, values, frequency, np.zeros((T, n), dtype=bool))


@pytest.fixture
def daily_panel():
    return make_panel()


def write_csv(path: Path, header: str, rows: list[str]) -> Path:
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def write_config(path: Path, **overrides) -> Path:
    cfg = dict(overrides)
    path.write_text(json.dumps(cfg, indent=2))
    return path
