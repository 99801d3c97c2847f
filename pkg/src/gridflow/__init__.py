"""gridflow: compile tensor recurrences to per-PE systolic programs and
simulate them on configurable processor grids."""

__version__ = "0.1.0"
