"""Synthetic bay-monitoring dataset: 7 variables at 5 buoys, with gaps.

Water-quality variables respond to the weather and tide drivers (turbidity
to rain and wind, salinity to rain and water level, dissolved oxygen to
temperature), so an importance analysis has a known answer to find.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .data import LongTable
from .seeding import stream

BAY_VARIABLES = (
    "Dissolved Oxygen",
    "Precipitation",
    "Salinity",
    "Temperature",
    "Turbidity",
    "Water Level",
    "Wind Speed",
)
BAY_LOCATIONS = ("Buoy1", "Buoy2", "Buoy3", "Buoy4", "Buoy5")
BAY_ORIGIN = "2021-01-01T00:00"
DRIVERS = ("Precipitation", "Temperature", "Water Level", "Wind Speed")
RESPONSES = ("Dissolved Oxygen", "Salinity", "Turbidity")


def _ar1(rng, n, phi, scale):
    out = np.zeros(n)
    eps = rng.normal(0.0, scale, n)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def bay_series(hours: int, seed: int = 0) -> dict[tuple[str, str], np.ndarray]:
    """Complete (gap-free) hourly series per (location, variable)."""
    rng = stream(seed, "fixture.signals")
    t = np.arange(hours, dtype=np.float64)
    diurnal = np.sin(2 * np.pi * t / 24.0)
    rain_events = (rng.random(hours) < 0.03) * rng.exponential(3.0, hours)
    rain = np.convolve(rain_events, np.exp(-np.arange(6) / 2.0), mode="full")[:hours]
    rain_memory = np.convolve(rain, np.exp(-np.arange(48) / 12.0), mode="full")[:hours] / 6.0
    wind = np.abs(6.0 + 1.5 * diurnal + _ar1(rng, hours, 0.95, 0.6))
    tide = 1.6 * np.sin(2 * np.pi * t / 12.42) + 0.3 * np.sin(2 * np.pi * t / 24.0 + 0.7)
    out = {}
    for j, loc in enumerate(BAY_LOCATIONS):
        r = stream(seed, f"fixture.{loc}")
        temp = 9.0 + 0.4 * j + 2.0 * np.sin(2 * np.pi * t / (24.0 * 30)) + 0.8 * diurnal + _ar1(r, hours, 0.9, 0.15)
        level = 2.5 + tide * (1.0 + 0.05 * j) + r.normal(0, 0.05, hours)
        turb = 1.0 + 0.3 * j + 0.8 * rain_memory + 0.15 * wind + _ar1(r, hours, 0.8, 0.2)
        sal = 33.0 - 0.2 * j - 1.2 * rain_memory + 0.4 * (level - 2.5) + _ar1(r, hours, 0.85, 0.1)
        oxy = 12.5 - 0.35 * temp + 0.05 * wind + _ar1(r, hours, 0.85, 0.08)
        series = {
            "Dissolved Oxygen": oxy,
            "Precipitation": rain + r.exponential(0.02, hours),
            "Salinity": sal,
            "Temperature": temp,
            "Turbidity": turb,
            "Water Level": level,
            "Wind Speed": wind + r.normal(0, 0.3, hours),
        }
        for var in BAY_VARIABLES:
            out[(loc, var)] = np.round(series[var], 4)
    return out


def make_bay_table(hours: int = 600, seed: int = 0, drop_rate: float = 0.15, outages: int = 2) -> LongTable:
    """Long table with random drop-outs plus ``outages`` multi-day gaps per series."""
    series = bay_series(hours, seed)
    rng = stream(seed, "fixture.missing")
    ts, locs, vars_, vals = [], [], [], []
    for (loc, var), y in series.items():
        keep = rng.random(hours) >= drop_rate
        for _ in range(outages):
            length = int(rng.integers(24, 73))
            start = int(rng.integers(0, max(hours - length, 1)))
            keep[start:start + length] = False
        idx = np.nonzero(keep)[0]
        ts.append(idx)
        locs.append(np.full(idx.size, loc))
        vars_.append(np.full(idx.size, var))
        vals.append(y[idx])
    return LongTable(np.concatenate(ts), np.concatenate(locs), np.concatenate(vars_), np.concatenate(vals), BAY_ORIGIN)


def bundled_bay_csv() -> Path:
    """Path of the packaged fixture CSV (``make_bay_table()`` defaults)."""
    return Path(str(resources.files("sertkit") / "fixtures_data" / "bay_fixture.csv"))
