"""Entropic herding: moment-matching mixtures built by a greedy herding dynamic."""

__version__ = "0.1.0"

from .core import FeatureMap, HerdingConfig, MomentSpec, PRESETS, standardize_from_data, standardize_from_model
from .engine import HerdingRun, run_entropic, run_point, run_point_metropolis
from .families import Gauss1D, GaussDiag, PointMass, SpinBernoulli
from .mixture import MixtureModel

__all__ = [
    "FeatureMap", "HerdingConfig", "MomentSpec", "PRESETS", "standardize_from_data", "standardize_from_model",
    "HerdingRun", "run_entropic", "run_point", "run_point_metropolis",
    "Gauss1D", "GaussDiag", "PointMass", "SpinBernoulli", "MixtureModel",
]
