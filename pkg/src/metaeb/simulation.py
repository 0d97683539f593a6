"""Simulation scenarios and the replication driver.

Scenarios I-IV: logistic model with four standard covariates and one new
covariate, internal n=200, three external models fitted on 30,000 draws.
V: nine standard covariates, VI: three standard and five new ones, n=500.
All covariates are standard normal with common correlation 0.3.

External studies are fitted once per run (they are fixed published models);
only the internal and validation samples are redrawn per replicate.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.special import expit

from .asymptotics import CovarianceRepairWarning
from .data import Dataset, ExternalModelSpec, build_design
from .glm import FitError, fit_arrays
from .metrics import avg_prediction_variance, brier_ratio
from .pipeline import run_pipeline

SCENARIO_IDS = ("I", "II", "III", "IV", "V", "VI")
N_TEST = 1000
MIN_REPS = 50

# Scenario II: stream for the single 500-row external sample behind model 1.
# Model 1 is one fixed, noticeably off fit; this stream gives fitted
# coefficients off by about (+0.04, +0.14, -0.13), so CML_1 inherits biases of
# that size.
SMALL_EXTERNAL_SEED = 489
# Scenario III: in model 1's population B = B0 + c0 + c1 X1 + c2 X2, tuned so
# that CML_1's large-sample biases are about (0.65, -0.16, 0.16).
COVARIATE_SHIFT = (1.43, -0.378, 0.350)
# Scenario IV: model 3's population adds c0 to the intercept and c1 to each X
# slope, tuned so that CML_3's biases are about 1.69 and 0.75.
OUTCOME_SHIFT = (1.805, 0.831)


@dataclass(frozen=True)
class Scenario:
    id: str
    p: int
    q: int
    true_gamma: tuple[float, ...]
    corr: float
    n_internal: int
    n_external: tuple[int, ...]
    external_covariates: tuple[tuple[int, ...], ...]   # 0-based indices into X
    perturbation: Mapping = field(default_factory=lambda: MappingProxyType({}))
    calibrated: bool = False

    @property
    def x_names(self):
        return tuple(f"X{j + 1}" for j in range(self.p))

    @property
    def b_names(self):
        return ("B",) if self.q == 1 else tuple(f"B{j + 1}" for j in range(self.q))

    @property
    def coef_names(self):
        return ("(Intercept)",) + self.x_names + self.b_names

    @property
    def K(self):
        return len(self.external_covariates)


def _gamma(p, q):
    return (-1.0,) + (-0.5,) * p + (0.5,) * q


def get_scenario(scenario_id: str, **overrides) -> Scenario:
    """Build one of the six standard scenarios; keyword overrides replace fields."""
    sid = str(scenario_id).upper()
    if sid not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario_id!r}; choose from {SCENARIO_IDS}")
    base_sets = ((0, 1), (0, 2), (0, 1, 2, 3))
    kw = dict(id=sid, p=4, q=1, true_gamma=_gamma(4, 1), corr=0.3, n_internal=200,
              n_external=(30_000,) * 3, external_covariates=base_sets)
    if sid == "II":
        kw["n_external"] = (500, 30_000, 30_000)
        kw["perturbation"] = {"small_external": {"model": 0, "seed": SMALL_EXTERNAL_SEED}}
        kw["calibrated"] = True
    elif sid == "III":
        kw["perturbation"] = {"covariate_shift": {"model": 0, "b_shift": COVARIATE_SHIFT}}
        kw["calibrated"] = True
    elif sid == "IV":
        kw["perturbation"] = {"outcome_shift": {"model": 2, "intercept": OUTCOME_SHIFT[0],
                                                "slope": OUTCOME_SHIFT[1]}}
        kw["calibrated"] = True
    elif sid == "V":
        kw.update(p=9, true_gamma=_gamma(9, 1), n_internal=500,
                  external_covariates=((0, 1), tuple(range(7)), (0, 1, 2, 3, 6, 7)))
    elif sid == "VI":
        kw.update(p=3, q=5, true_gamma=_gamma(3, 5), n_internal=500,
                  external_covariates=((0, 1), (0, 2), (0, 1, 2)))
    kw.update(overrides)
    kw["perturbation"] = MappingProxyType(dict(kw.get("perturbation") or {}))
    return Scenario(**kw)


def _stream(*entropy):
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def draw_population(scenario: Scenario, n, rng, gamma=None, b_shift=None):
    """Covariates ``[X, B]``, outcomes and true probabilities."""
    d = scenario.p + scenario.q
    corr = np.full((d, d), scenario.corr)
    np.fill_diagonal(corr, 1.0)
    cov_x = rng.standard_normal((n, d)) @ np.linalg.cholesky(corr).T
    if b_shift is not None:
        shift = b_shift[0] + cov_x[:, :len(b_shift) - 1] @ np.asarray(b_shift[1:])
        cov_x[:, scenario.p:] += shift[:, None]
    g = np.asarray(scenario.true_gamma if gamma is None else gamma, dtype=float)
    prob = expit(g[0] + cov_x @ g[1:])
    y = (rng.random(n) < prob).astype(float)
    return cov_x, y, prob


def external_specs(scenario: Scenario, seed) -> list[ExternalModelSpec]:
    """Fit each external model on its own synthetic external sample."""
    pert = scenario.perturbation
    specs = []
    for k, cols in enumerate(scenario.external_covariates):
        rng = _stream(seed, 1, k)
        gamma, b_shift = None, None
        if "small_external" in pert and pert["small_external"]["model"] == k:
            rng = _stream(pert["small_external"]["seed"], 1, k)
        if "covariate_shift" in pert and pert["covariate_shift"]["model"] == k:
            b_shift = pert["covariate_shift"]["b_shift"]
        if "outcome_shift" in pert and pert["outcome_shift"]["model"] == k:
            sh = pert["outcome_shift"]
            g = np.asarray(scenario.true_gamma, dtype=float).copy()
            g[0] += sh["intercept"]
            g[1:1 + scenario.p] += sh["slope"]
            gamma = g
        cov_x, y, _ = draw_population(scenario, scenario.n_external[k], rng, gamma, b_shift)
        design = np.column_stack([np.ones(len(y)), cov_x[:, list(cols)]])
        fit = fit_arrays(design, y)
        specs.append(ExternalModelSpec(f"external{k + 1}", "logit",
                                       [scenario.x_names[c] for c in cols], fit.gamma_hat))
    return specs


def _dataset(scenario, cov_x, y):
    names = scenario.x_names + scenario.b_names
    return Dataset(y, cov_x, names, scenario.x_names, scenario.b_names)


def generate(scenario: Scenario, seed, replicate_index, specs=None):
    """Internal data, external specs, and a validation set with true probabilities."""
    if specs is None:
        specs = external_specs(scenario, seed)
    rng = _stream(seed, 2, replicate_index)
    cov_x, y, _ = draw_population(scenario, scenario.n_internal, rng)
    cov_v, y_v, p_v = draw_population(scenario, N_TEST, rng)
    return _dataset(scenario, cov_x, y), specs, _dataset(scenario, cov_v, y_v), p_v


def estimator_labels(K):
    return (["direct"] + [f"cml{k + 1}" for k in range(K)] + [f"eb{k + 1}" for k in range(K)]
            + ["ivw", "ocwe", "sclearner"])


def _replicate(args):
    scenario, seed, rep, specs, mc_draws = args
    internal, specs, valid, p_true = generate(scenario, seed, rep, specs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CovarianceRepairWarning)
        try:
            res = run_pipeline(internal, specs, mc_draws=mc_draws, seed=(seed, 3, rep))
        except (FitError, np.linalg.LinAlgError, ArithmeticError) as exc:
            return rep, None, repr(exc)
    estimates, covs = [], []
    for r in res.reports:
        estimates.append(r.estimate)
        covs.append(r.cov)
    design_v = build_design(valid)
    metrics = []
    for est, cov in zip(estimates, covs):
        p_hat = expit(design_v @ est)
        metrics.append((avg_prediction_variance(cov, design_v),
                        float(np.mean((p_hat - p_true) ** 2)),
                        brier_ratio(p_hat, valid.outcome)))
    flags = [bool("large_discrepancy" in r.flags) for r in res.reports if r.kind == "eb"]
    out = dict(
        est=np.array(estimates),
        se=np.array([np.sqrt(np.clip(np.diag(c), 0, None)) for c in covs]),
        w_ivw=res.combined["ivw"].weights,
        w_ocwe=res.combined["ocwe"].weights,
        metrics=np.array(metrics),
        flags=np.array(flags),
    )
    return rep, out, None


@dataclass
class ReplicationSummary:
    scenario: str
    reps: int
    seed: int
    mc_draws: int
    calibrated: bool
    labels: list[str]
    coef_names: list[str]
    true_gamma: np.ndarray
    estimates: np.ndarray      # (reps_ok, estimators, d)
    ses: np.ndarray
    weights_ivw: np.ndarray    # (reps_ok, K)
    weights_ocwe: np.ndarray
    metrics: np.ndarray        # (reps_ok, estimators, 3): pred var, SSE, scaled Brier
    discrepancy_flags: np.ndarray
    failures: list[tuple[int, str]]
    external: list[ExternalModelSpec]

    def _idx(self, label):
        return self.labels.index(label)

    def bias(self, label):
        return self.estimates[:, self._idx(label)].mean(axis=0) - self.true_gamma

    def sd(self, label):
        return self.estimates[:, self._idx(label)].std(axis=0, ddof=1)

    def ese(self, label):
        return self.ses[:, self._idx(label)].mean(axis=0)

    def coverage(self, label, z=1.959963984540054):
        i = self._idx(label)
        hit = np.abs(self.estimates[:, i] - self.true_gamma) <= z * self.ses[:, i]
        return hit.mean(axis=0)

    def mean_metrics(self, label):
        return self.metrics[:, self._idx(label)].mean(axis=0)

    @property
    def failure_rate(self):
        return len(self.failures) / self.reps

    def table_rows(self):
        rows = []
        for label in self.labels:
            b, s, e, c = self.bias(label), self.sd(label), self.ese(label), self.coverage(label)
            for j, nm in enumerate(self.coef_names):
                rows.append((label, nm, float(b[j]), float(s[j]), float(e[j]), float(c[j])))
        return rows


def run_scenario(scenario: Scenario, reps=500, seed=0, mc_draws=2000,
                 workers=1) -> ReplicationSummary:
    """Run the full pipeline on ``reps`` internal datasets and summarise.

    Results do not depend on ``workers``; each replicate has its own stream.
    Fewer than 50 replicates run, with a warning, for smoke tests.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    if reps < MIN_REPS:
        warnings.warn(f"{reps} replicates give unreliable summaries; use at least {MIN_REPS}",
                      stacklevel=2)
    specs = external_specs(scenario, seed)
    jobs = [(scenario, seed, r, specs, mc_draws) for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=4))
    else:
        results = [_replicate(j) for j in jobs]
    ok = [out for _, out, _ in results if out is not None]
    failures = [(rep, err) for rep, out, err in results if out is None]
    if not ok:
        raise FitError(f"all {reps} replicates failed; first error: {failures[0][1]}")

    def stack(key):
        return np.array([o[key] for o in ok])

    return ReplicationSummary(
        scenario=scenario.id, reps=reps, seed=int(seed), mc_draws=mc_draws,
        calibrated=scenario.calibrated, labels=estimator_labels(scenario.K),
        coef_names=list(scenario.coef_names),
        true_gamma=np.asarray(scenario.true_gamma, dtype=float),
        estimates=stack("est"), ses=stack("se"), weights_ivw=stack("w_ivw"),
        weights_ocwe=stack("w_ocwe"), metrics=stack("metrics"),
        discrepancy_flags=stack("flags"), failures=failures, external=specs,
    )


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def write_summary_table(summary: ReplicationSummary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["estimator", "coefficient", "bias", "sd", "ese", "coverage"])
        for label, nm, b, s, e, c in summary.table_rows():
            writer.writerow([label, nm, f"{b:.6f}", f"{s:.6f}", f"{e:.6f}", f"{c:.4f}"])


def summary_to_dict(summary: ReplicationSummary) -> dict:
    metric_names = ("avg_pred_var", "sse", "scaled_brier")
    return {
        "scenario": summary.scenario,
        "calibrated_scenario": summary.calibrated,
        "reps": summary.reps,
        "seed": summary.seed,
        "mc_draws": summary.mc_draws,
        "failures": len(summary.failures),
        "failure_rate": summary.failure_rate,
        "external_models": [
            {"name": s.name, "covariates": list(s.covariates),
             "coefficients": [_num(c) for c in s.coefficients]} for s in summary.external
        ],
        "mean_weights": {
            "ivw": [_num(w) for w in summary.weights_ivw.mean(axis=0)],
            "ocwe": [_num(w) for w in summary.weights_ocwe.mean(axis=0)],
        },
        "mean_metrics": {
            label: dict(zip(metric_names, (_num(v) for v in summary.mean_metrics(label))))
            for label in summary.labels
        },
        "large_discrepancy_rate": [_num(v) for v in summary.discrepancy_flags.mean(axis=0)],
    }


def write_results(summary: ReplicationSummary, path):
    with open(path, "w") as fh:
        json.dump(summary_to_dict(summary), fh, indent=2)
        fh.write("\n")
