"""Synthetic cohorts with known hazards: deformed ellipsoids plus tabular covariates."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from .preprocess import BIOMARKER_COLUMNS, RawClinicalRecord
from .survival import SurvivalRecord

ELLIPSOID_AXES = (1.0, 0.6, 0.4)
BUMP_ANCHOR = (1.0, 0.0, 0.0)
BUMP_WIDTH = 0.5  # radians, Gaussian falloff of the bump around the anchor
BUMP_SCALE = 0.2  # radial displacement per unit of deformation at the anchor

# location/scale of each biomarker; raw = loc + scale * z with z standard normal
BIOMARKER_SCALES = {
    "csf_abeta42": (1000.0, 200.0),
    "csf_ttau": (300.0, 60.0),
    "csf_ptau181": (30.0, 6.0),
    "fdg_pet": (6.0, 0.6),
    "av45_pet": (1.2, 0.2),
}
Z_TRUNCATION = 4.0
VOLUME_BASE = 0.0025
VOLUME_SHAPE_EFFECT = 0.05
VOLUME_NOISE = 0.02


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of a synthetic cohort.

    ``tabular_coefficients`` are the true log-hazard ratios of the five
    biomarkers per standard deviation, in the order of ``BIOMARKER_COLUMNS``.
    A ``censoring_rate_target`` of 0 switches censoring off.
    """

    n_subjects: int = 400
    points_per_cloud: int = 1024
    shape_signal_strength: float = 1.0
    tabular_coefficients: tuple[float, ...] = (0.5, 0.5, 0.0, 0.0, 0.0)
    baseline_hazard_rate: float = 1.0 / 36.0
    censoring_rate_target: float = 0.3
    rng_seed: int = 0
    education_levels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "tabular_coefficients", tuple(float(c) for c in self.tabular_coefficients))
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be at least 2")
        if self.points_per_cloud < 1:
            raise ValueError("points_per_cloud must be positive")
        if len(self.tabular_coefficients) != len(BIOMARKER_COLUMNS):
            raise ValueError(f"tabular_coefficients needs {len(BIOMARKER_COLUMNS)} values, got {len(self.tabular_coefficients)}")
        if not self.baseline_hazard_rate > 0:
            raise ValueError(f"baseline_hazard_rate must be positive, got {self.baseline_hazard_rate}")
        if not 0 <= self.censoring_rate_target < 1:
            raise ValueError(f"censoring_rate_target must lie in [0, 1), got {self.censoring_rate_target}")
        if self.education_levels < 2:
            raise ValueError("education_levels must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tabular_coefficients"] = list(self.tabular_coefficients)
        return d


@dataclass
class SyntheticSubject:
    cloud: np.ndarray
    raw: RawClinicalRecord
    true_log_hazard: float
    record: SurvivalRecord
    deformation: float = 0.0
    latent: np.ndarray = field(default_factory=lambda: np.zeros(0))


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _sample_ellipsoid(rng: np.random.Generator, k: int, axes) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform points on the ellipsoid surface by rejection from the sphere.

    Returns the surface points and the unit-sphere directions they came from.
    """
    a = np.asarray(axes, dtype=np.float64)
    # surface element of the map u -> a*u is prod(a) * |u / a|
    g_max = np.prod(a) / a.min()
    dirs = []
    have = 0
    while have < k:
        u = rng.normal(size=(2 * k, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.prod(a) * np.linalg.norm(u / a, axis=1)
        keep = u[rng.uniform(size=u.shape[0]) * g_max < g]
        dirs.append(keep)
        have += keep.shape[0]
    u = np.concatenate(dirs)[:k]
    return u * a, u


def generate_cloud(deformation: float, seed, k: int = 1024, axes=ELLIPSOID_AXES) -> np.ndarray:
    """K points on an ellipsoid with a Gaussian radial dent of size ``deformation``.

    Positive deformation pushes the surface inward around the anchor direction
    (atrophy), negative pushes it outward. The cloud is centred at the origin.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts, u = _sample_ellipsoid(rng, k, axes)
    if deformation != 0.0:
        anchor = np.asarray(BUMP_ANCHOR) / np.linalg.norm(BUMP_ANCHOR)
        angle = np.arccos(np.clip(u @ anchor, -1.0, 1.0))
        falloff = np.exp(-0.5 * (angle / BUMP_WIDTH) ** 2)
        radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        pts = pts - (BUMP_SCALE * deformation * falloff)[:, None] * radial
    pts = pts - pts.mean(axis=0)
    return pts


def censoring_horizon(event_times: np.ndarray, target: float) -> float:
    """Horizon H such that Uniform(0, H) censoring censors ``target`` of subjects on average.

    For a subject with event time t, P(C < t) = min(t / H, 1).
    """
    t = np.asarray(event_times, dtype=np.float64)
    if not 0 < target < 1:
        raise ValueError(f"censoring target {target} is not achievable")

    def excess(h):
        return np.minimum(t / h, 1.0).mean() - target

    lo, hi = t.min() * 1e-6, t.max() / target * 10
    if excess(lo) <= 0 or excess(hi) >= 0:
        raise ValueError(f"censoring target {target} is not achievable for these event times")
    return brentq(excess, lo, hi, xtol=1e-12, rtol=1e-12)


def _draw_times(rng: np.random.Generator, log_hazard: np.ndarray, spec: CohortSpec):
    rate = spec.baseline_hazard_rate * np.exp(log_hazard)
    t = rng.exponential(1.0 / rate)
    if spec.censoring_rate_target == 0:
        return t, np.ones(t.size, dtype=np.int64)
    horizon = censoring_horizon(t, spec.censoring_rate_target)
    c = rng.uniform(0.0, horizon, size=t.size)
    y = np.minimum(t, c)
    return y, (t <= c).astype(np.int64)


def _truncated_normal(rng: np.random.Generator, size) -> np.ndarray:
    z = rng.normal(size=size)
    bad = np.abs(z) > Z_TRUNCATION
    while bad.any():
        z[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(z) > Z_TRUNCATION
    return z


def generate_cohort(spec: CohortSpec) -> list[SyntheticSubject]:
    """Draw a cohort; the result is a pure function of ``spec``.

    Covariates and the cloud of subject i come from a generator seeded by
    (rng_seed, i); event and censoring times from a generator seeded by
    rng_seed alone.
    """
    n = spec.n_subjects
    beta = np.asarray(spec.tabular_coefficients)
    latents, deforms, clouds, raws = [], [], [], []
    for i in range(n):
        rng = subject_rng(spec.rng_seed, i)
        z = _truncated_normal(rng, len(BIOMARKER_COLUMNS))
        deformation = float(_truncated_normal(rng, 1)[0])
        age = float(rng.uniform(55.0, 90.0))
        gender = int(rng.integers(0, 2))
        education = int(rng.integers(1, spec.education_levels + 1))
        vol = VOLUME_BASE * (1.0 - VOLUME_SHAPE_EFFECT * deformation + VOLUME_NOISE * rng.normal())
        cloud = generate_cloud(deformation, rng, spec.points_per_cloud)
        markers = {c: BIOMARKER_SCALES[c][0] + BIOMARKER_SCALES[c][1] * z[j] for j, c in enumerate(BIOMARKER_COLUMNS)}
        raws.append(
            RawClinicalRecord(
                subject_id=f"S{i:05d}",
                age=age,
                gender=gender,
                education=education,
                hippocampus_volume=float(vol),
                **markers,
            )
        )
        latents.append(z)
        deforms.append(deformation)
        clouds.append(cloud)
    z = np.asarray(latents)
    deforms = np.asarray(deforms)
    log_hazard = z @ beta + spec.shape_signal_strength * deforms
    y, d = _draw_times(np.random.default_rng(np.random.SeedSequence([spec.rng_seed, n, 1])), log_hazard, spec)
    return [
        SyntheticSubject(
            cloud=clouds[i],
            raw=raws[i],
            true_log_hazard=float(log_hazard[i]),
            record=SurvivalRecord(float(y[i]), int(d[i]), raws[i].subject_id),
            deformation=float(deforms[i]),
            latent=z[i],
        )
        for i in range(n)
    ]


def generate_tabular(
    n: int,
    coefficients,
    baseline_hazard_rate: float = 0.1,
    censoring_rate_target: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard-normal covariates with exponential proportional-hazards times.

    Returns ``(X, y, delta)``; used for checking coefficient recovery.
    """
    beta = np.asarray(coefficients, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, beta.size))
    spec = CohortSpec(
        n_subjects=max(n, 2),
        baseline_hazard_rate=baseline_hazard_rate,
        censoring_rate_target=censoring_rate_target,
    )
    y, d = _draw_times(rng, x @ beta, spec)
    return x, y, d


_SPEC_TYPES = {
    "n_subjects": int,
    "points_per_cloud": int,
    "shape_signal_strength": float,
    "baseline_hazard_rate": float,
    "censoring_rate_target": float,
    "rng_seed": int,
    "education_levels": int,
}


def parse_cohort_spec(text: str) -> CohortSpec:
    """Read a ``[cohort]`` INI section into a :class:`CohortSpec`.

    ``tabular_coefficients`` is a comma-separated list of five numbers.
    """
    import configparser

    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(text)
    if not cp.has_section("cohort"):
        raise ValueError("cohort spec needs a [cohort] section")
    kw = {}
    for key, value in cp.items("cohort"):
        if key == "tabular_coefficients":
            kw[key] = tuple(float(v) for v in value.split(","))
        elif key in _SPEC_TYPES:
            try:
                kw[key] = _SPEC_TYPES[key](value.strip())
            except ValueError:
                raise ValueError(f"[cohort] {key}: cannot parse {value!r}") from None
        else:
            raise ValueError(f"unknown key {key!r} in [cohort]")
    return CohortSpec(**kw)
