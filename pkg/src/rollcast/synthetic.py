"""Deterministic synthetic panels for demos and tests.

Two generators: a metapopulation epidemic curve driven by the same
compartmental dynamics the priors assume, and a weekday-modulated panel
with a planted multiplicative calendar effect.
"""

from __future__ import annotations

import csv
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .graph import row_normalize
from .panel import PanelDataset, PopulationVector


def ring_adjacency(n: int) -> np.ndarray:
    """Symmetric ring of n regions (each touches two neighbors)."""
    A = np.zeros((n, n))
    for i in range(n):
        A[i, (i + 1) % n] = 1.0
        A[i, (i - 1) % n] = 1.0
    return A


def make_epidemic_panel(
    seed: int = 0,
    T: int = 160,
    n: int = 5,
    frequency: str = "daily",
    start: date = date(2021, 1, 4),
    noise: float = 0.02,
    population_range: tuple[float, float] = (5e4, 2e5),
) -> tuple[PanelDataset, np.ndarray, PopulationVector]:
    """Coupled compartmental incidence curves with multiplicative noise.

    Returns (panel, adjacency, populations). Two staggered waves per
    region, seeded unevenly so outbreaks rise at different times.
    """
    rng = np.random.default_rng(seed)
    A = ring_adjacency(n)
    P = row_normalize(A).matrix
    pops = rng.uniform(*population_range, size=n)
    S = pops.copy()
    I = rng.uniform(5, 40, size=n)
    S -= I
    beta = rng.uniform(0.25, 0.4, size=n)
    gamma = 0.18
    values = np.zeros((T, n))
    reseed_at = int(T * 0.7)  # second wave rises inside the evaluation window
    for t in range(T):
        if t == reseed_at:
            S = S + 0.6 * (pops - S)  # waning immunity makes a real second wave possible
            I = I + rng.uniform(5, 30, size=n)
            beta = rng.uniform(0.3, 0.45, size=n)
        Imix = P @ I
        z = beta * (S / pops) * Imix
        S = np.maximum(S - z, 0.0)
        I = np.maximum(I + z - gamma * I, 0.0)
        values[t] = z * rng.lognormal(0.0, noise, size=n)
    step = timedelta(days=1 if frequency == "daily" else 7)
    dates = tuple(start + step * t for t in range(T))
    regions = tuple(f"r{i:02d}" for i in range(n))
    panel = PanelDataset(dates, regions, values, frequency, np.zeros((T, n), dtype=bool))
    return panel, A, PopulationVector(regions, pops)


def make_weekday_panel(
    seed: int = 0,
    T: int = 160,
    n: int = 4,
    start: date = date(2021, 1, 4),
    base_level: tuple[float, float] = (2.0, 5.0),
    sigma_walk: float = 0.02,
    weekday_amplitude: float = 0.35,
    noise: float = 0.03,
) -> tuple[PanelDataset, np.ndarray, PopulationVector]:
    """Daily panel with a planted multiplicative day-of-week effect.

    A slow lognormal random walk per region is modulated by a shared
    weekday factor and small observation noise, so the calendar carries
    real signal that a forecaster must model rather than copy from a
    stale same-weekday lag.
    """
    rng = np.random.default_rng(seed)
    level = rng.uniform(*base_level, size=n)
    factors = 1.0 + weekday_amplitude * np.array([0.9, 0.2, -0.4, -0.9, -0.2, 0.5, 1.0])
    values = np.zeros((T, n))
    dates = tuple(start + timedelta(days=t) for t in range(T))
    for t in range(T):
        level = level * np.exp(rng.normal(0, sigma_walk, n))
        values[t] = level * factors[dates[t].weekday()] * np.exp(rng.normal(0, noise, n))
    regions = tuple(f"r{i:02d}" for i in range(n))
    panel = PanelDataset(dates, regions, values, "daily", np.zeros((T, n), dtype=bool))
    return panel, ring_adjacency(n), PopulationVector(regions, np.full(n, 1e5))


def write_adjacency_csv(A: np.ndarray, regions: tuple[str, ...], path: str | Path) -> None:
    # Entry (i, j) is the relation from region j to region i, so the edge
    # row is (src=j, dst=i, weight).
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for i in range(A.shape[0]):
            for j in range(A.shape[1]):
                if A[i, j] != 0:
                    writer.writerow([regions[j], regions[i], repr(float(A[i, j]))])


def write_population_csv(populations: PopulationVector, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "population"])
        for region, pop in zip(populations.regions, populations.populations):
            writer.writerow([region, repr(float(pop))])


def write_fixture(out_dir: str | Path, kind: str = "epidemic", seed: int = 0,
                  T: int = 160, n: int = 5) -> dict[str, str]:
    """Materialize a synthetic dataset as the CSV triplet the CLI ingests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "epidemic":
        panel, A, pops = make_epidemic_panel(seed=seed, T=T, n=n)
    elif kind == "weekday":
        panel, A, pops = make_weekday_panel(seed=seed, T=T, n=n)
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    from .panel import save_panel

    paths = {
        "panel": str(out / "panel.csv"),
        "adjacency": str(out / "adjacency.csv"),
        "population": str(out / "population.csv"),
    }
    save_panel(panel, paths["panel"])
    write_adjacency_csv(A, panel.regions, paths["adjacency"])
    write_population_csv(pops, paths["population"])
    return paths
