"""Integrating published regression models with an internal dataset.

Each external model constrains the internal fit through an empirical
likelihood (constrained maximum likelihood, CML). An empirical Bayes (EB)
step shrinks each CML fit toward the unconstrained internal fit, and the
resulting estimators are combined across external models.
"""
from .asymptotics import (CovarianceRepairWarning, EbCovariance, JointAsymptoticCov,
                          eb_covariance, eb_point, estimate_blocks, joint_cov)
from .cml import CmlFit, InfeasibleConstraint, fit_cml
from .combiners import (CombinationResult, combine_ivw, combine_ocwe, combine_sclearner,
                        simplex_qp)
from .data import (Dataset, ExternalModelSpec, SpecError, build_design, load_spec,
                   map_indices, read_dataset, recenter_external)
from .glm import FitError, GlmFit, fit_mle
from .metrics import MetricReport, evaluate
from .pipeline import ModelFitError, PipelineResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CmlFit", "CombinationResult", "CovarianceRepairWarning", "Dataset", "EbCovariance",
    "ExternalModelSpec", "FitError", "GlmFit", "InfeasibleConstraint", "JointAsymptoticCov",
    "MetricReport", "ModelFitError", "PipelineResult", "SpecError", "build_design",
    "combine_ivw", "combine_ocwe", "combine_sclearner", "eb_covariance", "eb_point",
    "estimate_blocks", "evaluate", "fit_cml", "fit_mle", "joint_cov", "load_spec",
    "map_indices", "read_dataset", "recenter_external", "run_pipeline", "simplex_qp",
]
