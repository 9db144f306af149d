"""Electrified clay calcination: loop simulation and grid-aware scheduling.

The package couples a dynamic model of an electrically heated clay
calcination loop (plug-flow calciner, preheat and separation cyclones,
fan/filter/hot-gas-generator recirculation) with an hourly electricity
scheduler that dispatches the plant on a radial distribution feeder.
"""

__version__ = "0.1.0"

from . import chem, control, dae, ems, grid, integrate, plant, simplex, units

__all__ = [
    "chem",
    "control",
    "dae",
    "ems",
    "grid",
    "integrate",
    "plant",
    "simplex",
    "units",
    "__version__",
]
