"""Clinical tabular conditioning and the pathology-prior loss weight map.

Clinical records hold demographics (age, sex, education), cognitive scores
(MMSE, ADAS-Cog-13), the ApoE4 allele count, and the diagnosis. The encoded
condition vector z-scores the continuous fields, one-hot encodes sex, and
appends one missing-indicator bit per field; the diagnosis is deliberately
NOT part of the vector (it is the downstream prediction target and only used
for stratification).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataError

SEX_LEVELS = ("M", "F")
DIAGNOSIS_LEVELS = ("CN", "MCI", "AD")

# Fields entering the condition vector, in order.
CONTINUOUS_FIELDS = ("age", "education", "mmse", "adas13", "apoe4")
ENCODED_FIELDS = CONTINUOUS_FIELDS + ("sex",)

CLINICAL_DIM = len(CONTINUOUS_FIELDS) + len(SEX_LEVELS) + len(ENCODED_FIELDS)

AGE_BINS = ("<60", "60-70", "70-80", ">80")


def age_bin(age: float | None) -> str:
    """Bin an age in years into the demographic groups used for reporting."""
    if age is None:
        return "unknown"
    if age < 60:
        return "<60"
    if age < 70:
        return "60-70"
    if age < 80:
        return "70-80"
    return ">80"


@dataclass(frozen=True)
class ClinicalRecord:
    """One subject's tabular data; ``None`` marks an explicitly missing field."""

    subject_id: str
    age: float | None = None
    sex: str | None = None
    education: float | None = None
    mmse: float | None = None
    adas13: float | None = None
    apoe4: int | None = None
    diagnosis: str | None = None

    def __post_init__(self):
        if self.sex is not None and self.sex not in SEX_LEVELS:
            raise DataError(f"unknown sex level {self.sex!r}")
        if self.diagnosis is not None and self.diagnosis not in DIAGNOSIS_LEVELS:
            raise DataError(f"unknown diagnosis level {self.diagnosis!r}")
        if self.mmse is not None and not (0 <= self.mmse <= 30):
            raise DataError(f"mmse {self.mmse} outside [0, 30]")
        if self.apoe4 is not None and self.apoe4 not in (0, 1, 2):
            raise DataError(f"apoe4 {self.apoe4} not in {{0, 1, 2}}")
        if self.adas13 is not None and self.adas13 < 0:
            raise DataError(f"adas13 {self.adas13} negative")


@dataclass(frozen=True)
class ClinicalStats:
    """Per-field normalization statistics, computed on the training split only."""

    mean: dict[str, float]
    std: dict[str, float]

    @classmethod
    def from_records(cls, records: list[ClinicalRecord]) -> "ClinicalStats":
        mean, std = {}, {}
        for name in CONTINUOUS_FIELDS:
            values = [getattr(r, name) for r in records if getattr(r, name) is not None]
            if values:
                mean[name] = float(np.mean(values))
                s = float(np.std(values))
                std[name] = s if s > 0 else 1.0
            else:
                mean[name] = 0.0
                std[name] = 1.0
        return cls(mean=mean, std=std)

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalStats":
        return cls(mean=dict(d["mean"]), std=dict(d["std"]))


def encode_clinical(record: ClinicalRecord, stats: ClinicalStats) -> np.ndarray:
    """Encode one record as a fixed-length float32 condition vector.

    Layout: z-scored continuous fields, sex one-hot, then one missing bit per
    encoded field. Missing continuous values are imputed with the training
    mean (slot 0 after z-scoring) and flagged.
    """
    vec = np.zeros(CLINICAL_DIM, dtype=np.float32)
    missing = np.zeros(len(ENCODED_FIELDS), dtype=np.float32)
    for i, name in enumerate(CONTINUOUS_FIELDS):
        value = getattr(record, name)
        if value is None:
            missing[i] = 1.0
        else:
            vec[i] = (float(value) - stats.mean[name]) / stats.std[name]
    offset = len(CONTINUOUS_FIELDS)
    if record.sex is None:
        missing[len(CONTINUOUS_FIELDS)] = 1.0
    else:
        vec[offset + SEX_LEVELS.index(record.sex)] = 1.0
    vec[offset + len(SEX_LEVELS) :] = missing
    return vec


# ---------------------------------------------------------------------------
# Clinical CSV
# ---------------------------------------------------------------------------

CSV_HEADER = ["subject_id", "age", "sex", "education", "mmse", "adas13", "apoe4", "diagnosis"]
_NUMERIC = {"age": float, "education": float, "mmse": float, "adas13": float, "apoe4": int}


def write_clinical_csv(records: list[ClinicalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            row = []
            for name in CSV_HEADER:
                value = getattr(rec, name)
                if value is None:
                    row.append("")
                elif name == "apoe4":
                    row.append(str(int(value)))
                else:
                    row.append(str(value))
            writer.writerow(row)


def read_clinical_csv(path) -> list[ClinicalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(
                f"{path}: expected header {CSV_HEADER}, got {reader.fieldnames}"
            )
        records = []
        for row in reader:
            kwargs = {"subject_id": row["subject_id"]}
            for name in CSV_HEADER[1:]:
                cell = row[name].strip()
                if cell == "":
                    kwargs[name] = None
                elif name in _NUMERIC:
                    kwargs[name] = _NUMERIC[name](float(cell))
                else:
                    kwargs[name] = cell
            records.append(ClinicalRecord(**kwargs))
    return records


# ---------------------------------------------------------------------------
# ROI loss weighting
# ---------------------------------------------------------------------------


@dataclass
class RoiWeightMap:
    """Voxelwise loss weights with mean exactly 1, all entries positive."""

    weights: np.ndarray
    inside_weight: float
    outside_weight: float


def build_roi_weight_map(
    mask: np.ndarray, inside: float = 3.0, outside: float = 1.0
) -> RoiWeightMap:
    """Build a mean-one loss weight map that penalizes the ROI more.

    The raw map takes ``inside`` on the mask and ``outside`` elsewhere, then
    is divided by its global mean so weighting redistributes rather than
    rescales the loss. A degenerate (empty or full) mask yields a uniform map
    of ones with a warning.
    """
    mask = np.asarray(getattr(mask, "data", mask))
    mask = mask > 0.5 if mask.dtype != bool else mask
    if not (inside > outside > 0):
        raise ConfigurationError(
            f"need inside > outside > 0, got inside={inside}, outside={outside}"
        )
    n_inside = int(mask.sum())
    if n_inside == 0 or n_inside == mask.size:
        warnings.warn("degenerate ROI mask: using uniform weights", stacklevel=2)
        return RoiWeightMap(np.ones(mask.shape, dtype=np.float64), inside, outside)
    raw = np.where(mask, float(inside), float(outside))
    weights = raw / raw.mean()
    return RoiWeightMap(weights, inside, outside)
