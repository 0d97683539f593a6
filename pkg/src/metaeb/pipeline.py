"""Two-step integration: per-model constrained and EB fits, then combination."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .asymptotics import (EbCovariance, JointAsymptoticCov, eb_covariance, eb_point,
                          estimate_blocks, joint_cov, large_discrepancy)
from .cml import CmlFit, fit_cml
from .combiners import CombinationResult, combine_ivw, combine_ocwe, combine_sclearner
from .data import Dataset, ExternalModelSpec, build_design, map_indices, recenter_external
from .glm import FitError, GlmFit, fit_mle

METHODS = ("mle", "cml", "eb", "ivw", "ocwe", "sclearner")
COMBINERS = ("ivw", "ocwe", "sclearner")


class ModelFitError(FitError):
    """A constrained fit failed for a named external model."""

    def __init__(self, model, cause):
        super().__init__(f"{model}: {cause}")
        self.model = model


@dataclass(frozen=True)
class EstimateReport:
    """A coefficient vector with its covariance and where it came from."""

    label: str             # "mle", "cml:<model>", "eb:<model>", "ivw", ...
    kind: str              # mle | cml | eb | combined
    estimate: np.ndarray
    cov: np.ndarray
    weights: np.ndarray | None = None
    flags: tuple[str, ...] = ()

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass
class PipelineResult:
    coef_names: tuple[str, ...]
    internal: GlmFit
    cml: list[CmlFit] = field(default_factory=list)
    eb: list[np.ndarray] = field(default_factory=list)
    joint: JointAsymptoticCov | None = None
    eb_cov: EbCovariance | None = None
    combined: dict[str, CombinationResult] = field(default_factory=dict)
    reports: list[EstimateReport] = field(default_factory=list)

    def report(self, label) -> EstimateReport:
        for r in self.reports:
            if r.label == label:
                return r
        raise KeyError(label)


def run_pipeline(dataset: Dataset, specs: Sequence[ExternalModelSpec], link="logit",
                 mc_draws=5000, seed=0, combiners: Sequence[str] = COMBINERS,
                 centre_draws=False) -> PipelineResult:
    """Fit the internal model, integrate each external model, then combine.

    Asymptotic blocks are evaluated at the internal MLE. The Monte Carlo
    draws behind the EB covariance have mean zero unless ``centre_draws``,
    in which case they are centred at the fitted estimates. With no external
    models only the internal fit is returned.
    """
    specs = [recenter_external(s) if s.recenter else s for s in specs]
    internal = fit_mle(dataset, link)
    res = PipelineResult(dataset.coef_names, internal)
    res.reports.append(EstimateReport("mle", "mle", internal.gamma_hat, internal.cov))
    if not specs:
        return res

    for spec in specs:
        try:
            res.cml.append(fit_cml(dataset, spec, internal))
        except (FitError, np.linalg.LinAlgError) as exc:
            raise ModelFitError(spec.name, exc) from exc
    try:
        blocks = estimate_blocks(dataset, specs, internal.gamma_hat, link, internal.dispersion)
        res.joint = joint_cov(blocks, dataset.n)
    except np.linalg.LinAlgError as exc:
        raise ModelFitError(",".join(s.name for s in specs), exc) from exc
    V_I = res.joint.var_internal
    for k, (spec, fit) in enumerate(zip(specs, res.cml)):
        flags = ("degenerate_constraint",) if fit.degenerate else ()
        res.reports.append(EstimateReport(f"cml:{spec.name}", "cml", fit.gamma_cml,
                                          res.joint.var_cml(k), flags=flags))
    if mc_draws:
        centre = ([f.gamma_cml for f in res.cml], internal.gamma_hat) if centre_draws else (None, None)
        res.eb_cov = eb_covariance(res.joint, *centre, draws=mc_draws, seed=seed)
    for k, (spec, fit) in enumerate(zip(specs, res.cml)):
        eb = eb_point(internal.gamma_hat, fit.gamma_cml, V_I)
        res.eb.append(eb)
        flags = ("large_discrepancy",) if large_discrepancy(internal.gamma_hat, fit.gamma_cml,
                                                           V_I) else ()
        cov = res.eb_cov.var(k) if res.eb_cov is not None else np.full_like(V_I, np.nan)
        res.reports.append(EstimateReport(f"eb:{spec.name}", "eb", eb, cov, flags=flags))

    if res.eb_cov is None:
        return res
    design = build_design(dataset)
    positions = map_indices(specs, dataset)
    for method in combiners:
        if method == "ivw":
            out = combine_ivw(res.eb, res.eb_cov, design)
        elif method == "ocwe":
            out = combine_ocwe(res.eb, res.eb_cov, design)
        elif method == "sclearner":
            out = combine_sclearner(res.eb, res.eb_cov, positions, internal)
        else:
            raise ValueError(f"unknown combiner {method!r}")
        res.combined[method] = out
        res.reports.append(EstimateReport(method, "combined", out.gamma_final, out.cov_final,
                                          weights=out.weights))
    return res
