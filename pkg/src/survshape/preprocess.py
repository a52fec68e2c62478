"""Tabular covariate encoding for the wide (linear) pathway.

Age enters through a natural cubic spline with four degrees of freedom,
education through orthogonal polynomial contrasts, and the cross-product
transformation appends age-spline x gender interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

BIOMARKER_COLUMNS = ("csf_abeta42", "csf_ttau", "csf_ptau181", "fdg_pet", "av45_pet")
VOLUME_COLUMN = "hippocampus_volume"
SPLINE_DF = 4
SPLINE_PREFIX = "age_ns"
EDUCATION_PREFIX = "education_poly"
INTERACTION_SEP = "×"


class EncoderNotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawClinicalRecord:
    subject_id: str
    age: float
    gender: int
    education: int
    csf_abeta42: float
    csf_ttau: float
    csf_ptau181: float
    fdg_pet: float
    av45_pet: float
    hippocampus_volume: float | None = None

    def __post_init__(self):
        values = [self.age, self.csf_abeta42, self.csf_ttau, self.csf_ptau181, self.fdg_pet, self.av45_pet]
        if self.hippocampus_volume is not None:
            values.append(self.hippocampus_volume)
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"{self.subject_id}: clinical values must be finite")
        if self.age <= 0:
            raise ValueError(f"{self.subject_id}: age must be positive, got {self.age}")
        if self.gender not in (0, 1):
            raise ValueError(f"{self.subject_id}: gender must be 0 or 1, got {self.gender}")
        for name in ("csf_abeta42", "csf_ttau", "csf_ptau181"):
            if getattr(self, name) < 0:
                raise ValueError(f"{self.subject_id}: {name} must be non-negative")
        if self.hippocampus_volume is not None and not 0 < self.hippocampus_volume < 1:
            raise ValueError(f"{self.subject_id}: hippocampus_volume must lie in (0, 1), got {self.hippocampus_volume}")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) != len(self.column_names):
            raise ValueError("values and column_names differ in length")
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("column_names must be unique")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.column_names.index(name)])


# ---------------------------------------------------------------------------
# natural cubic spline


class NaturalSpline:
    """Natural cubic spline basis without intercept.

    Built from the cubic B-spline basis on the boundary and interior knots,
    projected onto the null space of the second-derivative constraints at the
    two boundary knots. Outside the boundary knots the basis continues
    linearly.
    """

    def __init__(self, boundary: Sequence[float], interior: Sequence[float]):
        lo, hi = float(boundary[0]), float(boundary[1])
        interior = np.asarray(interior, dtype=np.float64)
        if not lo < hi:
            raise ValueError(f"boundary knots must be increasing, got {boundary}")
        if interior.size and (interior.min() <= lo or interior.max() >= hi or np.any(np.diff(interior) <= 0)):
            raise ValueError("interior knots must be strictly increasing and inside the boundary")
        self.boundary = (lo, hi)
        self.interior = interior
        t = np.concatenate([[lo] * 4, interior, [hi] * 4])
        nbasis = t.size - 4
        # drop the first B-spline so the basis carries no intercept
        self._bspline = BSpline(t, np.eye(nbasis)[:, 1:], 3, extrapolate=False)
        self._d1 = self._bspline.derivative(1)
        constraint = self._bspline.derivative(2)(np.array([lo, hi]))
        q, _ = np.linalg.qr(constraint.T, mode="complete")
        self._projection = q[:, 2:]
        self._at_boundary = self._bspline(np.array([lo, hi])) @ self._projection
        self._slope_at_boundary = self._d1(np.array([lo, hi])) @ self._projection

    @classmethod
    def from_data(cls, x: Sequence[float], df: int = SPLINE_DF) -> "NaturalSpline":
        """Boundary knots at the data range, df - 1 interior knots at quantiles."""
        x = np.asarray(x, dtype=np.float64)
        probs = np.linspace(0, 1, df + 1)[1:-1]
        return cls((x.min(), x.max()), np.quantile(x, probs))

    @property
    def df(self) -> int:
        return self._projection.shape[1]

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        lo, hi = self.boundary
        out = np.empty((x.size, self.df))
        inside = (x >= lo) & (x <= hi)
        if inside.any():
            out[inside] = self._bspline(x[inside]) @ self._projection
        below, above = x < lo, x > hi
        if below.any():
            out[below] = self._at_boundary[0] + np.outer(x[below] - lo, self._slope_at_boundary[0])
        if above.any():
            out[above] = self._at_boundary[1] + np.outer(x[above] - hi, self._slope_at_boundary[1])
        return out

    def to_dict(self) -> dict:
        return {"boundary": list(self.boundary), "interior": self.interior.tolist()}

    @classmethod
    def from_dict(cls, state: dict) -> "NaturalSpline":
        return cls(state["boundary"], state["interior"])


def natural_spline_basis(age, spline: NaturalSpline | None) -> np.ndarray:
    if spline is None:
        raise EncoderNotFittedError("spline knots are not fitted")
    return spline(age)


# ---------------------------------------------------------------------------
# orthogonal polynomial contrasts


def orthogonal_poly_contrasts(num_levels: int) -> np.ndarray:
    """Contrast matrix (num_levels x num_levels-1) of orthonormal polynomial trends."""
    if num_levels < 2:
        raise ValueError("orthogonal polynomial coding needs at least 2 levels")
    levels = np.arange(1, num_levels + 1, dtype=np.float64)
    centred = levels - levels.mean()
    vander = np.vander(centred, num_levels, increasing=True)
    q, r = np.linalg.qr(vander)
    # Gram-Schmidt convention: positive diagonal of R
    q = q * np.sign(np.diag(r))
    return q[:, 1:]


def orthogonal_poly_coding(level: int, num_levels: int) -> np.ndarray:
    if not 1 <= level <= num_levels:
        raise ValueError(f"education level {level} outside 1..{num_levels}")
    return orthogonal_poly_contrasts(num_levels)[level - 1]


# ---------------------------------------------------------------------------
# cross products


def default_interactions(spline_df: int = SPLINE_DF) -> list[tuple[str, str]]:
    return [(f"{SPLINE_PREFIX}{k}", "gender") for k in range(1, spline_df + 1)]


def interaction_name(a: str, b: str) -> str:
    return f"{a}{INTERACTION_SEP}{b}"


def cross_product_transform(x: FeatureVector, interactions: Sequence[tuple[str, str]]) -> FeatureVector:
    names = list(x.column_names)
    out = []
    for a, b in interactions:
        for col in (a, b):
            if col not in names:
                raise KeyError(f"unknown column {col!r} in interaction ({a}, {b})")
        out.append(x.values[names.index(a)] * x.values[names.index(b)])
    return FeatureVector(np.asarray(out, dtype=np.float64), tuple(interaction_name(a, b) for a, b in interactions))


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderState:
    spline: dict
    num_levels: int
    means: dict[str, float]
    scales: dict[str, float]
    interactions: list[tuple[str, str]]
    continuous: list[str]


@dataclass
class FeatureEncoder:
    """Fits on the training split and maps records to wide feature vectors.

    Column order: standardized continuous covariates, standardized age-spline
    columns, gender (0/1), education contrasts, then interactions.
    """

    num_levels: int = 4
    with_volume: bool = False
    interactions: list[tuple[str, str]] | None = None
    state: EncoderState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.interactions is None:
            self.interactions = default_interactions()
        self.interactions = [tuple(p) for p in self.interactions]
        self._spline: NaturalSpline | None = None
        self._contrasts = orthogonal_poly_contrasts(self.num_levels)
        if self.state is not None:
            self._spline = NaturalSpline.from_dict(self.state.spline)

    @property
    def continuous_columns(self) -> list[str]:
        cols = list(BIOMARKER_COLUMNS)
        if self.with_volume:
            cols.append(VOLUME_COLUMN)
        return cols

    @property
    def spline_columns(self) -> list[str]:
        return [f"{SPLINE_PREFIX}{k}" for k in range(1, SPLINE_DF + 1)]

    @property
    def base_columns(self) -> list[str]:
        edu = [f"{EDUCATION_PREFIX}{k}" for k in range(1, self.num_levels)]
        return self.continuous_columns + self.spline_columns + ["gender"] + edu

    @property
    def column_names(self) -> list[str]:
        return self.base_columns + [interaction_name(a, b) for a, b in self.interactions]

    @property
    def width(self) -> int:
        return len(self.column_names)

    @property
    def fitted(self) -> bool:
        return self.state is not None

    def _raw_matrix(self, records: Sequence[RawClinicalRecord]) -> tuple[np.ndarray, np.ndarray]:
        cont = np.empty((len(records), len(self.continuous_columns)))
        for i, rec in enumerate(records):
            for j, col in enumerate(self.continuous_columns):
                v = getattr(rec, col)
                if v is None:
                    raise ValueError(f"{rec.subject_id}: missing value for {col}")
                cont[i, j] = v
        ages = np.array([r.age for r in records], dtype=np.float64)
        return cont, ages

    def fit(self, records: Sequence[RawClinicalRecord]) -> "FeatureEncoder":
        if self.state is not None:
            raise RuntimeError("encoder is already fitted")
        if len(records) < 2:
            raise ValueError("need at least 2 training records to fit the encoder")
        cont, ages = self._raw_matrix(records)
        spline = NaturalSpline.from_data(ages)
        spl = spline(ages)
        stacked = np.hstack([cont, spl])
        names = self.continuous_columns + self.spline_columns
        means = stacked.mean(axis=0)
        scales = stacked.std(axis=0)
        for name, sd in zip(names, scales):
            if not sd > 1e-12:
                raise ValueError(f"column {name!r} has zero variance in the training split")
        self._spline = spline
        self.state = EncoderState(
            spline=spline.to_dict(),
            num_levels=self.num_levels,
            means=dict(zip(names, means.tolist())),
            scales=dict(zip(names, scales.tolist())),
            interactions=list(self.interactions),
            continuous=self.continuous_columns,
        )
        return self

    def transform_many(self, records: Sequence[RawClinicalRecord]) -> np.ndarray:
        if self.state is None:
            raise EncoderNotFittedError("transform called before fit")
        cont, ages = self._raw_matrix(records)
        names = self.continuous_columns + self.spline_columns
        mu = np.array([self.state.means[n] for n in names])
        sd = np.array([self.state.scales[n] for n in names])
        std = (np.hstack([cont, natural_spline_basis(ages, self._spline)]) - mu) / sd
        gender = np.array([[r.gender] for r in records], dtype=np.float64)
        levels = np.array([r.education for r in records])
        if np.any(levels < 1) or np.any(levels > self.num_levels):
            bad = next(r for r in records if not 1 <= r.education <= self.num_levels)
            raise ValueError(f"{bad.subject_id}: education level {bad.education} outside 1..{self.num_levels}")
        edu = self._contrasts[levels - 1]
        base = np.hstack([std, gender, edu])
        base_names = self.base_columns
        cross = np.empty((len(records), len(self.interactions)))
        for k, (a, b) in enumerate(self.interactions):
            for col in (a, b):
                if col not in base_names:
                    raise KeyError(f"unknown column {col!r} in interaction ({a}, {b})")
            cross[:, k] = base[:, base_names.index(a)] * base[:, base_names.index(b)]
        return np.hstack([base, cross])

    def transform(self, record: RawClinicalRecord) -> FeatureVector:
        return FeatureVector(self.transform_many([record])[0], tuple(self.column_names))

    def fit_transform(self, records: Sequence[RawClinicalRecord]) -> np.ndarray:
        return self.fit(records).transform_many(records)

    def to_dict(self) -> dict:
        if self.state is None:
            raise EncoderNotFittedError("cannot serialize an unfitted encoder")
        s = self.state
        return {
            "num_levels": self.num_levels,
            "with_volume": self.with_volume,
            "interactions": [list(p) for p in self.interactions],
            "spline": s.spline,
            "means": s.means,
            "scales": s.scales,
            "continuous": s.continuous,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        interactions = [tuple(p) for p in d["interactions"]]
        state = EncoderState(
            spline=d["spline"],
            num_levels=d["num_levels"],
            means=dict(d["means"]),
            scales=dict(d["scales"]),
            interactions=interactions,
            continuous=list(d["continuous"]),
        )
        return cls(num_levels=d["num_levels"], with_volume=d["with_volume"], interactions=interactions, state=state)
