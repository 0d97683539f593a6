"""Datasets, external model specifications and covariate bookkeeping."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

LINKS = ("logit", "identity")


class SpecError(ValueError):
    """Raised when a dataset or external model specification is malformed."""


@dataclass(frozen=True)
class Dataset:
    """Internal individual-level data.

    Parameters
    ----------
    outcome : array of shape (n,)
    covariates : array of shape (n, p + q)
        Columns follow ``names``.
    names : ordered labels of the covariate columns.
    x_names : the standard covariates (those an external model may use).
    b_names : the new covariates, only measured internally.
    """

    outcome: np.ndarray
    covariates: np.ndarray
    names: tuple[str, ...]
    x_names: tuple[str, ...]
    b_names: tuple[str, ...]

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1) if len(self.names) == 1 else cov.reshape(len(y), -1)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "b_names", tuple(self.b_names))
        y.setflags(write=False)
        cov.setflags(write=False)

        if len(set(self.names)) != len(self.names):
            dup = sorted({nm for nm in self.names if self.names.count(nm) > 1})
            raise SpecError(f"duplicate covariate names: {dup}")
        if cov.shape != (len(y), len(self.names)):
            raise SpecError(
                f"covariates have shape {cov.shape}, expected ({len(y)}, {len(self.names)})"
            )
        if not self.b_names:
            raise SpecError("at least one new covariate (b_names) is required")
        wanted = list(self.x_names) + list(self.b_names)
        if len(set(wanted)) != len(wanted):
            raise SpecError("x_names and b_names overlap or repeat")
        missing = [nm for nm in wanted if nm not in self.names]
        if missing:
            raise SpecError(f"covariates not present in names: {missing}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(cov))):
            raise SpecError("dataset contains non-finite entries")
        if len(y) < len(wanted) + 1:
            raise SpecError(f"n={len(y)} is too small for {len(wanted) + 1} parameters")

    @property
    def n(self) -> int:
        return len(self.outcome)

    @property
    def p(self) -> int:
        return len(self.x_names)

    @property
    def q(self) -> int:
        return len(self.b_names)

    @property
    def coef_names(self) -> tuple[str, ...]:
        """Labels of the target coefficients, intercept first."""
        return ("(Intercept)",) + self.x_names + self.b_names

    def check_binary(self):
        """Raise unless the outcome is 0/1 with both classes present."""
        values = set(np.unique(self.outcome).tolist())
        if not values <= {0.0, 1.0}:
            raise SpecError("logit link needs a binary 0/1 outcome")
        if len(values) < 2:
            raise SpecError("binary outcome contains a single class")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.outcome[rows], self.covariates[rows], self.names,
                       self.x_names, self.b_names)


@dataclass(frozen=True)
class ExternalModelSpec:
    """A published regression model for the same outcome.

    ``coefficients`` holds the intercept first, then one slope per entry of
    ``covariates``. ``recenter`` maps a covariate to ``(offset, scale)``
    meaning the external model saw ``scale * (x - offset)`` where ``x`` is
    the covariate in internal units.
    """

    name: str
    link: str
    covariates: tuple[str, ...]
    coefficients: np.ndarray
    recenter: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        coefs = np.asarray(self.coefficients, dtype=float).reshape(-1)
        coefs.setflags(write=False)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(
            self, "recenter",
            {k: (float(v[0]), float(v[1])) for k, v in dict(self.recenter).items()},
        )
        if self.link not in LINKS:
            raise SpecError(f"{self.name}: unsupported link {self.link!r}")
        if len(set(self.covariates)) != len(self.covariates):
            raise SpecError(f"{self.name}: repeated covariate")
        if len(coefs) != len(self.covariates) + 1:
            raise SpecError(
                f"{self.name}: {len(coefs)} coefficients for "
                f"{len(self.covariates)} covariates plus intercept"
            )
        if not np.all(np.isfinite(coefs)):
            raise SpecError(f"{self.name}: non-finite coefficient")
        for key, (offset, scale) in self.recenter.items():
            if key not in self.covariates:
                raise SpecError(f"{self.name}: recenter key {key!r} is not a covariate")
            if scale == 0 or not math.isfinite(scale) or not math.isfinite(offset):
                raise SpecError(f"{self.name}: invalid recenter entry for {key!r}")

    @property
    def dim(self) -> int:
        return len(self.coefficients)


def build_design(dataset: Dataset) -> np.ndarray:
    """Design matrix ``[1, X, B]`` with columns ordered x_names then b_names."""
    cols = [dataset.names.index(nm) for nm in dataset.x_names + dataset.b_names]
    return np.column_stack([np.ones(dataset.n), dataset.covariates[:, cols]])


def recenter_external(spec: ExternalModelSpec) -> ExternalModelSpec:
    """Fold the recenter map into the coefficients.

    The returned spec gives the same linear predictor as ``spec`` for any
    covariate vector expressed in internal units.
    """
    coefs = np.array(spec.coefficients, dtype=float)
    for key, (offset, scale) in spec.recenter.items():
        j = spec.covariates.index(key) + 1
        slope = coefs[j]
        coefs[j] = slope * scale
        coefs[0] -= slope * scale * offset
    return ExternalModelSpec(spec.name, spec.link, spec.covariates, coefs)


@dataclass(frozen=True)
class IndexMap:
    """Column positions of each external model's sub-design in ``[1, X, B]``."""

    positions: tuple[tuple[int, ...], ...]

    def __getitem__(self, k: int) -> np.ndarray:
        return np.asarray(self.positions[k], dtype=int)

    def __len__(self):
        return len(self.positions)


def map_indices(specs: Sequence[ExternalModelSpec], dataset: Dataset) -> IndexMap:
    """Locate every external covariate among the internal standard covariates."""
    problems = []
    positions = []
    for spec in specs:
        pos = [0]
        for nm in spec.covariates:
            if nm in dataset.b_names:
                problems.append(f"{spec.name}: {nm!r} is a new covariate")
            elif nm not in dataset.x_names:
                problems.append(f"{spec.name}: {nm!r} not measured internally")
            else:
                pos.append(1 + dataset.x_names.index(nm))
        positions.append(tuple(pos))
    if problems:
        raise SpecError("; ".join(problems))
    return IndexMap(tuple(positions))


# ---------------------------------------------------------------------------
# file formats


def read_dataset(path, outcome: str, b_names: Sequence[str],
                 x_names: Sequence[str] | None = None) -> Dataset:
    """Read a comma-separated file with a header row.

    Every column other than the outcome and ``b_names`` is a standard
    covariate unless ``x_names`` is given.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SpecError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if outcome not in header:
        raise SpecError(f"{path}: outcome column {outcome!r} not found")
    for nm in b_names:
        if nm not in header:
            raise SpecError(f"{path}: column {nm!r} not found")
    try:
        values = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise SpecError(f"{path}: non-numeric entry ({exc})") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise SpecError(f"{path}: ragged rows")
    if x_names is None:
        x_names = [h for h in header if h != outcome and h not in b_names]
    names = [h for h in header if h != outcome]
    cols = [header.index(nm) for nm in names]
    return Dataset(values[:, header.index(outcome)], values[:, cols], names,
                   x_names, b_names)


def write_dataset(path, dataset: Dataset, outcome: str = "y"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([outcome, *dataset.names])
        for yi, row in zip(dataset.outcome, dataset.covariates):
            writer.writerow([repr(float(yi)), *(repr(float(v)) for v in row)])


def spec_from_dict(obj: Mapping) -> ExternalModelSpec:
    for key in ("name", "link", "covariates", "coefficients"):
        if key not in obj:
            raise SpecError(f"external spec missing field {key!r}")
    recenter = {}
    for key, entry in (obj.get("recenter") or {}).items():
        if not isinstance(entry, Mapping) or "scale" not in entry and "offset" not in entry:
            raise SpecError(f"recenter.{key}: expected an object with offset/scale")
        recenter[key] = (float(entry.get("offset", 0.0)), float(entry.get("scale", 1.0)))
    return ExternalModelSpec(
        name=str(obj["name"]),
        link=str(obj["link"]),
        covariates=tuple(obj["covariates"]),
        coefficients=np.asarray(obj["coefficients"], dtype=float),
        recenter=recenter,
    )


def spec_to_dict(spec: ExternalModelSpec) -> dict:
    out = {
        "name": spec.name,
        "link": spec.link,
        "covariates": list(spec.covariates),
        "coefficients": [float(c) for c in spec.coefficients],
    }
    if spec.recenter:
        out["recenter"] = {k: {"offset": o, "scale": s} for k, (o, s) in spec.recenter.items()}
    return out


def load_spec(path) -> ExternalModelSpec:
    """Load an external model from a JSON file."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, Mapping):
        raise SpecError(f"{path}: expected a JSON object")
    return spec_from_dict(obj)


def fixture_path(name: str) -> Path:
    """Path to a bundled external model fixture, e.g. ``"pcpt_hg"``."""
    return Path(__file__).with_name("fixtures") / f"{name}.json"
