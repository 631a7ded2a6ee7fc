"""Deformable image registration on dual tetrahedral meshes.

A biomechanical two-mesh transformation model is optimized by a clustered
multi-objective evolutionary algorithm, optionally seeded from externally
provided displacement fields, with a phantom-based evaluation harness.
"""

from .volumes import (  # noqa: F401
    Dvf,
    GuidancePair,
    LabelVolume,
    RegistrationProblem,
    Volume,
    build_problem,
    load_volume,
    preprocess_pair,
    save_volume,
    trilinear_sample,
)

__version__ = "0.1.0"
