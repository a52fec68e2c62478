"""Reading and writing cohort manifests and point-cloud files.

Manifest: UTF-8 CSV with a header row. Required columns are
``subject_id, cloud_path, y_months, delta`` followed by the clinical columns
``age, gender, education, csf_abeta42, csf_ttau, csf_ptau181, fdg_pet,
av45_pet``; ``hippocampus_volume`` is optional. ``cloud_path`` is resolved
relative to the manifest's directory.

Point cloud: one ``x y z`` line per point, decimal notation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocess import RawClinicalRecord, VOLUME_COLUMN
from .survival import SurvivalRecord

REQUIRED_COLUMNS = (
    "subject_id",
    "cloud_path",
    "y_months",
    "delta",
    "age",
    "gender",
    "education",
    "csf_abeta42",
    "csf_ttau",
    "csf_ptau181",
    "fdg_pet",
    "av45_pet",
)
OPTIONAL_COLUMNS = (VOLUME_COLUMN,)
_FLOAT_COLUMNS = ("y_months", "age", "csf_abeta42", "csf_ttau", "csf_ptau181", "fdg_pet", "av45_pet", VOLUME_COLUMN)
_INT_COLUMNS = {"delta": (0, 1), "gender": (0, 1), "education": None}


class DataFormatError(ValueError):
    """Malformed input file; the message names the file and the offending row or line."""


@dataclass
class ManifestRow:
    subject_id: str
    cloud_path: Path
    survival: SurvivalRecord
    clinical: RawClinicalRecord


@dataclass
class CohortManifest:
    path: Path
    rows: list[ManifestRow]
    has_volume: bool

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.rows]


@dataclass
class Cohort:
    """A fully loaded dataset: clinical records, equal-size clouds and outcomes."""

    subject_ids: list[str]
    clinical: list[RawClinicalRecord]
    clouds: np.ndarray
    times: np.ndarray
    events: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_ids)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return Cohort(
            [self.subject_ids[i] for i in idx],
            [self.clinical[i] for i in idx],
            self.clouds[idx],
            self.times[idx],
            self.events[idx],
        )


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataFormatError(f"{where}: non-finite value {text!r}")
    return value


def _parse_int(text: str, where: str, allowed) -> int:
    t = text.strip()
    if not t.lstrip("-").isdigit():
        raise DataFormatError(f"{where}: expected an integer, got {text!r}")
    value = int(t)
    if allowed is not None and value not in allowed:
        raise DataFormatError(f"{where}: value {value} not in {sorted(allowed)}")
    return value


def load_manifest(path, check_files: bool = True) -> CohortManifest:
    """Parse and validate a manifest. Row numbers count data rows from 1."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header row required") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        known = set(REQUIRED_COLUMNS) | set(OPTIONAL_COLUMNS)
        unknown = [c for c in header if c not in known]
        if unknown:
            raise DataFormatError(f"{path}: unknown column(s) {', '.join(unknown)}")
        if len(set(header)) != len(header):
            raise DataFormatError(f"{path}: duplicate column names in header")
        has_volume = VOLUME_COLUMN in header
        rows: list[ManifestRow] = []
        seen: dict[str, int] = {}
        for rownum, cells in enumerate(reader, start=1):
            where = f"{path}: row {rownum} (line {rownum + 1})"
            if len(cells) != len(header):
                raise DataFormatError(f"{where}: expected {len(header)} cells, got {len(cells)}")
            rec = dict(zip(header, cells))
            for col, val in rec.items():
                if val.strip() == "":
                    raise DataFormatError(f"{where}, column {col}: missing value")
            parsed: dict = {}
            for col in header:
                cell_where = f"{where}, column {col}"
                if col in _FLOAT_COLUMNS:
                    parsed[col] = _parse_float(rec[col], cell_where)
                elif col in _INT_COLUMNS:
                    parsed[col] = _parse_int(rec[col], cell_where, _INT_COLUMNS[col])
                else:
                    parsed[col] = rec[col].strip()
            sid = parsed["subject_id"]
            if sid in seen:
                raise DataFormatError(f"{where}: duplicate subject_id {sid!r} (first seen on row {seen[sid]})")
            seen[sid] = rownum
            cloud_path = Path(parsed["cloud_path"])
            if not cloud_path.is_absolute():
                cloud_path = path.parent / cloud_path
            if check_files and not cloud_path.is_file():
                raise DataFormatError(f"{where}: cloud file not found: {cloud_path}")
            try:
                survival = SurvivalRecord(parsed["y_months"], parsed["delta"], sid)
                clinical = RawClinicalRecord(
                    subject_id=sid,
                    age=parsed["age"],
                    gender=parsed["gender"],
                    education=parsed["education"],
                    csf_abeta42=parsed["csf_abeta42"],
                    csf_ttau=parsed["csf_ttau"],
                    csf_ptau181=parsed["csf_ptau181"],
                    fdg_pet=parsed["fdg_pet"],
                    av45_pet=parsed["av45_pet"],
                    hippocampus_volume=parsed.get(VOLUME_COLUMN),
                )
            except ValueError as exc:
                raise DataFormatError(f"{where}: {exc}") from None
            rows.append(ManifestRow(sid, cloud_path, survival, clinical))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return CohortManifest(path=path, rows=rows, has_volume=has_volume)


def format_decimal(value: float) -> str:
    """Shortest round-tripping decimal (never exponent) notation."""
    return np.format_float_positional(float(value), unique=True, trim="-")


def save_manifest(path, rows: Sequence[ManifestRow], with_volume: bool = True) -> None:
    path = Path(path)
    header = list(REQUIRED_COLUMNS) + ([VOLUME_COLUMN] if with_volume else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            c = row.clinical
            try:
                cloud_ref = row.cloud_path.relative_to(path.parent)
            except ValueError:
                cloud_ref = row.cloud_path
            cells = [
                row.subject_id,
                cloud_ref.as_posix(),
                format_decimal(row.survival.y),
                str(row.survival.delta),
                format_decimal(c.age),
                str(c.gender),
                str(c.education),
                format_decimal(c.csf_abeta42),
                format_decimal(c.csf_ttau),
                format_decimal(c.csf_ptau181),
                format_decimal(c.fdg_pet),
                format_decimal(c.av45_pet),
            ]
            if with_volume:
                if c.hippocampus_volume is None:
                    raise ValueError(f"{row.subject_id}: no hippocampus_volume to write")
                cells.append(format_decimal(c.hippocampus_volume))
            writer.writerow(cells)


def load_cloud(path) -> np.ndarray:
    path = Path(path)
    points = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if len(tokens) != 3:
                raise DataFormatError(f"{path}: line {lineno}: expected 3 coordinates, got {len(tokens)}")
            points.append([_parse_float(tok, f"{path}: line {lineno}") for tok in tokens])
    if not points:
        raise DataFormatError(f"{path}: empty point cloud")
    return np.asarray(points, dtype=np.float64)


def save_cloud(cloud, path) -> None:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"point cloud must be K x 3, got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud has non-finite coordinates")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(format_decimal(v) for v in p) + "\n" for p in cloud)


def resample_cloud(cloud, k_target: int, seed) -> np.ndarray:
    """Subsample without replacement (K > target) or upsample with replacement."""
    cloud = np.asarray(cloud, dtype=np.float64)
    k = cloud.shape[0]
    if k == 0:
        raise ValueError("cannot resample an empty point cloud")
    if k == k_target:
        return cloud.copy()
    rng = np.random.default_rng(seed)
    idx = rng.choice(k, size=k_target, replace=k < k_target)
    return cloud[idx]


def load_cohort(manifest, points: int | None = None, seed: int = 0) -> Cohort:
    """Load every cloud of a manifest; clouds are resampled to ``points`` when given.

    Without ``points`` every cloud must have the same size.
    """
    if not isinstance(manifest, CohortManifest):
        manifest = load_manifest(manifest)
    clouds = []
    for i, row in enumerate(manifest.rows):
        cloud = load_cloud(row.cloud_path)
        if points is not None:
            cloud = resample_cloud(cloud, points, np.random.SeedSequence([seed, i]))
        clouds.append(cloud)
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) > 1:
        raise DataFormatError(f"{manifest.path}: point clouds differ in size {sorted(sizes)}; pass a resampling size")
    return Cohort(
        subject_ids=manifest.subject_ids,
        clinical=[r.clinical for r in manifest.rows],
        clouds=np.stack(clouds),
        times=np.array([r.survival.y for r in manifest.rows]),
        events=np.array([r.survival.delta for r in manifest.rows], dtype=np.int64),
    )


def write_cohort(out_dir, subjects, with_volume: bool = True) -> Path:
    """Write synthetic subjects as ``manifest.csv`` plus ``clouds/<id>.xyz``."""
    out_dir = Path(out_dir)
    cloud_dir = out_dir / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in subjects:
        cpath = cloud_dir / f"{s.raw.subject_id}.xyz"
        save_cloud(s.cloud, cpath)
        rows.append(ManifestRow(s.raw.subject_id, cpath, s.record, s.raw))
    manifest = out_dir / "manifest.csv"
    save_manifest(manifest, rows, with_volume=with_volume)
    return manifest


def cohort_from_subjects(subjects) -> Cohort:
    """In-memory cohort from synthetic subjects, without touching the filesystem."""
    return Cohort(
        subject_ids=[s.raw.subject_id for s in subjects],
        clinical=[s.raw for s in subjects],
        clouds=np.stack([s.cloud for s in subjects]),
        times=np.array([s.record.y for s in subjects]),
        events=np.array([s.record.delta for s in subjects], dtype=np.int64),
    )
