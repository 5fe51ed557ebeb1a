"""Time-varying densities as shared-dictionary Gaussian mixtures fit by MMD.

Modules:
    core        domain types, mixture densities, model serialization
    kernel      Gaussian kernel, median heuristic, empirical MMD
    mmd_fit     closed-form MMD objective, simplex QP weights, dictionary updates
    ode_smooth  neural-ODE smoothing of weight tables (JAX)
    inference   two-arm MMD tests on weight trajectories
    simulate    synthetic DGP, KDE baseline, L2 benchmark
    ingest      CGM parsing and windowing
    cohort      multi-subject pipeline
    cli         command-line entry point
"""
from .core import (FittedModel, GaussianComponent, GaussianDictionary, InputError,
                   NumericalError, ParseError, SimplexVector, SnapshotDataset, TimeGrid,
                   WeightTable, deserialize_model, mixture_density, serialize_model)

__version__ = "0.1.0"

__all__ = [
    "FittedModel", "GaussianComponent", "GaussianDictionary", "InputError", "NumericalError",
    "ParseError", "SimplexVector", "SnapshotDataset", "TimeGrid", "WeightTable",
    "deserialize_model", "mixture_density", "serialize_model",
]
