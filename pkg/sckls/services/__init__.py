"""Estimation, testing and simulation services"""

from .estimators import HyperplaneModel, ShapeSpec, cnls_fit, local_linear_fit, predict, sckls_fit
from .qp_solver import QpProblem, lazy_constraint_solve, solve_qp
from .shape_tests import affinity_test, wild_bootstrap_shape_test

__all__ = [
    "HyperplaneModel",
    "ShapeSpec",
    "cnls_fit",
    "local_linear_fit",
    "predict",
    "sckls_fit",
    "QpProblem",
    "lazy_constraint_solve",
    "solve_qp",
    "affinity_test",
    "wild_bootstrap_shape_test",
]
