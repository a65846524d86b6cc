"""Böhm metrics, their Lichnerowicz spectrum, reduced Ricci-DeTurck flow and ancient orbits."""

from __future__ import annotations

__version__ = "0.1.0"

from .geometry import TensorPerturbation, WarpedProfile  # noqa: E402
from .bohm import BohmOptions, integrate_bohm  # noqa: E402

__all__ = ["__version__", "WarpedProfile", "TensorPerturbation", "BohmOptions", "integrate_bohm"]
