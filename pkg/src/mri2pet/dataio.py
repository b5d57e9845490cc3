"""Volume file format, synthetic phantom cohorts, and dataset splits.

Volumes are stored in a small binary container (PVOL): magic ``PVOL``,
version u16, dims 3*u32, modality tag u8, then little-endian float32 voxels
in row-major (C) order. Writes are atomic (temp file + rename).

The phantom generator produces paired MRI/PET volumes with a known smooth
cross-modal intensity transfer and a synthetic pathology region whose PET
contrast is three times the MRI contrast, plus a clinical record whose
cognitive scores track pathology severity.
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .conditioning import ClinicalRecord, age_bin
from .errors import ConfigurationError, ContractViolation, DataError
from .seeding import derive_seed

MAGIC = b"PVOL"
FORMAT_VERSION = 1
HEADER_SIZE = 4 + 2 + 12 + 1  # magic + version + dims + modality tag

MODALITY_CODES = {"MRI": 0, "PET": 1, "MASK": 2}
MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}

# PET pathology contrast is this multiple of the MRI contrast inside the ROI.
PET_CONTRAST_RATIO = 3.0

SEVERITY_BY_DIAGNOSIS = {"CN": 0.0, "MCI": 0.5, "AD": 1.0}


@dataclass
class Volume3D:
    """A scalar 3D intensity grid with a modality tag.

    Normalized volumes hold float32 data in [0, 1]; values must be finite.
    """

    data: np.ndarray
    modality: str = "MRI"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ContractViolation(f"volume must be 3D, got shape {self.data.shape}")
        if self.modality not in MODALITY_CODES:
            raise ContractViolation(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def write_volume(volume: Volume3D, path) -> None:
    """Write a volume to PVOL format atomically (temp file then rename)."""
    path = os.fspath(path)
    header = MAGIC + struct.pack(
        "<HIIIB",
        FORMAT_VERSION,
        *volume.data.shape,
        MODALITY_CODES[volume.modality],
    )
    payload = volume.data.astype("<f4", copy=False).tobytes(order="C")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_volume(path) -> Volume3D:
    """Read a PVOL file; raises DataError naming the byte offset on damage."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise DataError(
            f"{path}: truncated header, expected {HEADER_SIZE} bytes, got {len(raw)}"
        )
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    version, h, w, d, tag = struct.unpack("<HIIIB", raw[4:HEADER_SIZE])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version} at byte offset 4")
    if tag not in MODALITY_NAMES:
        raise DataError(f"{path}: unknown modality tag {tag} at byte offset 18")
    expected = HEADER_SIZE + 4 * h * w * d
    if len(raw) != expected:
        raise DataError(
            f"{path}: expected {expected} bytes for dims {h}x{w}x{d}, got {len(raw)}"
        )
    voxels = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(h, w, d)
    return Volume3D(data=voxels.copy(), modality=MODALITY_NAMES[tag])


def normalize_volume(raw: np.ndarray, modality: str = "MRI") -> Volume3D:
    """Min-max scale a raw volume to [0, 1] using 0.5/99.5 percentiles, clipped.

    A constant volume maps to uniform 0.5 with a warning.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ContractViolation("cannot normalize volume with non-finite values")
    lo, hi = np.percentile(raw, [0.5, 99.5])
    if hi <= lo:
        warnings.warn("constant volume: normalizing to uniform 0.5", stacklevel=2)
        return Volume3D(np.full(raw.shape, 0.5, dtype=np.float32), modality)
    scaled = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return Volume3D(scaled.astype(np.float32), modality)


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic subject volume pair.

    ``severity`` in [0, 1] scales the pathology: the MRI intensity inside the
    ROI drops by ``severity * mri_drop`` and the PET intensity by three times
    that. ``noise_level`` is the PET noise sigma; MRI receives half of it.
    ROI center/radius are fractions of the volume extent, shared across the
    cohort like an atlas region.
    """

    size: tuple[int, int, int] = (16, 16, 16)
    n_blobs: int = 6
    roi_center: tuple[float, float, float] = (0.62, 0.40, 0.55)
    roi_radius: float = 0.22
    severity: float = 0.0
    mri_drop: float = 0.05
    noise_level: float = 0.02

    def __post_init__(self):
        if not (0.0 <= self.severity <= 1.0):
            raise ConfigurationError("severity must lie in [0, 1]")
        if min(self.size) < 4:
            raise ConfigurationError("phantom volumes must be at least 4 voxels per axis")
        if self.mri_drop < 0 or self.noise_level < 0:
            raise ConfigurationError("mri_drop and noise_level must be nonnegative")


def mri_pet_transfer(x: np.ndarray) -> np.ndarray:
    """Fixed smooth monotone MRI-to-PET intensity map on [0, 1]."""
    x = np.asarray(x)
    return 0.10 + 0.80 * x - 0.15 * x * x


def roi_mask_for(spec: PhantomSpec) -> np.ndarray:
    """Boolean ellipsoidal pathology mask shared by every subject of a cohort."""
    grids = np.meshgrid(
        *[np.linspace(0.0, 1.0, n) for n in spec.size], indexing="ij"
    )
    r2 = sum((g - c) ** 2 for g, c in zip(grids, spec.roi_center))
    return r2 <= spec.roi_radius**2


def _anatomy(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random ellipsoid-blob anatomy scaled into [0.15, 0.85]."""
    grids = np.meshgrid(
        *[np.linspace(0.0, 1.0, n) for n in spec.size], indexing="ij"
    )
    vol = np.zeros(spec.size, dtype=np.float64)
    for _ in range(spec.n_blobs):
        center = rng.uniform(0.15, 0.85, size=3)
        axes = rng.uniform(0.12, 0.38, size=3)
        amp = rng.uniform(0.3, 1.0)
        r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
        vol += amp * np.exp(-r2)
    lo, hi = vol.min(), vol.max()
    if hi <= lo:
        return np.full(spec.size, 0.5)
    return 0.15 + 0.70 * (vol - lo) / (hi - lo)


def generate_phantom_pair(
    spec: PhantomSpec, seed: int
) -> tuple[Volume3D, Volume3D, ClinicalRecord]:
    """Generate one paired (MRI, PET, clinical record) phantom subject.

    The same seed and spec always produce bit-identical output. PET is the
    smooth transfer of the healthy anatomy minus a pathology drop of
    ``PET_CONTRAST_RATIO * severity * mri_drop`` inside the ROI, so the PET
    pathology contrast is exactly three times the MRI contrast before noise.
    """
    rng = np.random.default_rng(seed)
    anatomy = _anatomy(spec, rng)
    roi = roi_mask_for(spec)

    mri = anatomy - spec.severity * spec.mri_drop * roi
    pet = mri_pet_transfer(anatomy) - (
        spec.severity * PET_CONTRAST_RATIO * spec.mri_drop * roi
    )
    mri = mri + rng.normal(0.0, 0.5 * spec.noise_level, size=spec.size)
    pet = pet + rng.normal(0.0, spec.noise_level, size=spec.size)

    mri = np.clip(mri, 0.0, 1.0).astype(np.float32)
    pet = np.clip(pet, 0.0, 1.0).astype(np.float32)

    record = _sample_record(spec.severity, rng)
    return Volume3D(mri, "MRI"), Volume3D(pet, "PET"), record


def oracle_translate(
    mri: Volume3D, spec: PhantomSpec, severity: float
) -> Volume3D:
    """Reference translator that knows the phantom construction.

    Inverts the MRI pathology drop, applies the cross-modal transfer, and
    re-applies the PET drop. Its error against a generated PET is the noise
    floor trained models are judged against.
    """
    roi = roi_mask_for(spec)
    healthy = mri.data.astype(np.float64) + severity * spec.mri_drop * roi
    pet = mri_pet_transfer(healthy) - severity * PET_CONTRAST_RATIO * spec.mri_drop * roi
    return Volume3D(np.clip(pet, 0.0, 1.0).astype(np.float32), "PET")


def _sample_record(severity: float, rng: np.random.Generator) -> ClinicalRecord:
    """Clinical record consistent with severity: MMSE falls and ADAS rises."""
    if severity < 0.25:
        diagnosis = "CN"
    elif severity < 0.75:
        diagnosis = "MCI"
    else:
        diagnosis = "AD"
    age = float(np.clip(round(rng.normal(72.0 + 4.0 * severity, 7.0)), 55, 92))
    sex = "M" if rng.random() < 0.5 else "F"
    education = float(np.clip(round(rng.normal(16.0, 3.0)), 8, 22))
    mmse = float(np.clip(round(29.0 - 9.0 * severity + rng.normal(0.0, 1.2)), 0, 30))
    adas13 = float(np.clip(round(10.0 + 22.0 * severity + rng.normal(0.0, 3.0), 1), 0.0, 85.0))
    apoe4 = int(rng.binomial(2, 0.15 + 0.35 * severity))
    return ClinicalRecord(
        subject_id="",
        age=age,
        sex=sex,
        education=education,
        mmse=mmse,
        adas13=adas13,
        apoe4=apoe4,
        diagnosis=diagnosis,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def split_dataset(
    records: list[ClinicalRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    balance_keys: tuple[str, ...] = ("diagnosis", "age_bin", "sex"),
    seed: int = 0,
) -> dict[str, list[str]]:
    """Stratified subject-disjoint train/val/test split.

    Strata are the joint levels of ``balance_keys``; inside each stratum the
    split follows ``ratios`` by largest remainder, with leftover subjects
    assigned to whichever split is furthest below its global target so the
    overall totals are exact whenever possible. Per-stratum counts deviate
    at most one subject from the exact fractional quota. A stratum smaller
    than the number of splits is merged into its parent stratum (trailing
    balance keys dropped one by one) with a warning.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ConfigurationError("split ratios must be nonnegative")

    def stratum_key(rec: ClinicalRecord, keys) -> tuple:
        parts = []
        for key in keys:
            if key == "age_bin":
                parts.append(age_bin(rec.age))
            else:
                parts.append(getattr(rec, key))
        return tuple(parts)

    n_splits = sum(1 for r in ratios if r > 0)
    by_id = {rec.subject_id: rec for rec in records}
    level = len(balance_keys)
    strata: dict[tuple, list[str]] = {}
    for rec in records:
        strata.setdefault(stratum_key(rec, balance_keys), []).append(rec.subject_id)

    n_merged = 0
    while level > 0:
        small = [key for key, members in strata.items() if len(members) < n_splits]
        if not small:
            break
        level -= 1
        n_merged += len(small)
        for key in small:
            members = strata.pop(key)
            for sid in members:
                parent = stratum_key(by_id[sid], balance_keys[:level])
                strata.setdefault(parent, []).append(sid)
    if n_merged:
        warnings.warn(
            f"{n_merged} stratum(s) smaller than the split count; merged into "
            f"coarser strata",
            stacklevel=2,
        )

    rng = np.random.default_rng(seed)
    out: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    assigned = np.zeros(3)
    processed = 0

    pools = [sorted(strata[k]) for k in sorted(strata, key=lambda k: (len(k), k))]

    for members in pools:
        members = list(members)
        rng.shuffle(members)
        m = len(members)
        processed += m
        quota = np.array(ratios) * m
        base = np.floor(quota).astype(int)
        leftover = m - base.sum()
        # Assign leftovers to the splits furthest below their global target.
        deficit = np.array(ratios) * processed - (assigned + base)
        order = sorted(range(3), key=lambda i: (-deficit[i], i))
        counts = base.copy()
        for i in order[:leftover]:
            counts[i] += 1
        pos = 0
        for i, name in enumerate(SPLIT_NAMES):
            out[name].extend(members[pos : pos + counts[i]])
            pos += counts[i]
        assigned += counts

    for name in SPLIT_NAMES:
        out[name].sort()
    return out


# ---------------------------------------------------------------------------
# Cohort generation and dataset manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass
class Dataset:
    """An on-disk phantom cohort loaded into memory."""

    root: str
    size: tuple[int, int, int]
    phantom: PhantomSpec
    roi_mask: np.ndarray
    records: dict[str, ClinicalRecord]
    splits: dict[str, list[str]]
    mri: dict[str, Volume3D]
    pet: dict[str, Volume3D]
    severities: dict[str, float] = field(default_factory=dict)

    def subjects(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.records)
        return list(self.splits[split])


def generate_cohort(
    out_dir,
    count: int,
    spec: PhantomSpec,
    seed: int,
    ratios: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6),
    missing_rate: float = 0.05,
    force: bool = False,
) -> str:
    """Generate a balanced CN/MCI/AD phantom cohort with splits and manifest.

    Diagnoses cycle CN, MCI, AD so counts divisible by three are exactly
    balanced. Per-subject seeds derive from the master seed, so the output
    directory is byte-identical for identical arguments.
    """
    out_dir = os.fspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigurationError(
            f"output directory {out_dir} is not empty (use force to overwrite)"
        )
    os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
    if count == 0:
        warnings.warn("generating an empty cohort", stacklevel=2)

    diagnoses = ("CN", "MCI", "AD")
    records: list[ClinicalRecord] = []
    severities: dict[str, float] = {}
    entries: dict[str, dict] = {}
    miss_rng = np.random.default_rng(derive_seed(seed, "clinical-missing"))

    for idx in range(count):
        sid = f"S{idx:04d}"
        diagnosis = diagnoses[idx % 3]
        severity = SEVERITY_BY_DIAGNOSIS[diagnosis]
        subj_spec = replace(spec, severity=severity)
        mri, pet, record = generate_phantom_pair(
            subj_spec, derive_seed(seed, f"subject/{sid}")
        )
        record = replace(record, subject_id=sid)
        record = _blank_fields(record, miss_rng, missing_rate)
        mri_path = os.path.join("volumes", f"{sid}_mri.pvol")
        pet_path = os.path.join("volumes", f"{sid}_pet.pvol")
        write_volume(mri, os.path.join(out_dir, mri_path))
        write_volume(pet, os.path.join(out_dir, pet_path))
        records.append(record)
        severities[sid] = severity
        entries[sid] = {
            "mri": mri_path,
            "pet": pet_path,
            "diagnosis": record.diagnosis,
            "severity": severity,
        }

    splits = split_dataset(records, ratios, seed=derive_seed(seed, "split"))
    split_of = {sid: name for name, sids in splits.items() for sid in sids}
    for sid in entries:
        entries[sid]["split"] = split_of.get(sid, "train")

    roi = roi_mask_for(spec)
    write_volume(
        Volume3D(roi.astype(np.float32), "MASK"), os.path.join(out_dir, "roi_mask.pvol")
    )

    from .conditioning import write_clinical_csv

    write_clinical_csv(records, os.path.join(out_dir, "clinical.csv"))

    manifest = {
        "version": 1,
        "seed": seed,
        "size": list(spec.size),
        "phantom": {
            "size": list(spec.size),
            "n_blobs": spec.n_blobs,
            "roi_center": list(spec.roi_center),
            "roi_radius": spec.roi_radius,
            "mri_drop": spec.mri_drop,
            "noise_level": spec.noise_level,
        },
        "roi_mask": "roi_mask.pvol",
        "clinical_csv": "clinical.csv",
        "subjects": {sid: entries[sid] for sid in sorted(entries)},
    }
    tmp = os.path.join(out_dir, MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, MANIFEST_NAME))
    return out_dir


def _blank_fields(
    record: ClinicalRecord, rng: np.random.Generator, rate: float
) -> ClinicalRecord:
    """Blank optional score fields at the given rate (mimics registry gaps)."""
    updates = {}
    for name in ("mmse", "adas13", "apoe4"):
        if rng.random() < rate:
            updates[name] = None
    return replace(record, **updates) if updates else record


def load_dataset(root) -> Dataset:
    """Load a cohort directory written by generate_cohort."""
    root = os.fspath(root)
    manifest_path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    from .conditioning import read_clinical_csv

    records = {
        rec.subject_id: rec
        for rec in read_clinical_csv(os.path.join(root, manifest["clinical_csv"]))
    }
    phantom = PhantomSpec(
        size=tuple(manifest["phantom"]["size"]),
        n_blobs=manifest["phantom"]["n_blobs"],
        roi_center=tuple(manifest["phantom"]["roi_center"]),
        roi_radius=manifest["phantom"]["roi_radius"],
        mri_drop=manifest["phantom"]["mri_drop"],
        noise_level=manifest["phantom"]["noise_level"],
    )
    roi = read_volume(os.path.join(root, manifest["roi_mask"])).data > 0.5

    splits: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    mri: dict[str, Volume3D] = {}
    pet: dict[str, Volume3D] = {}
    severities: dict[str, float] = {}
    for sid, entry in manifest["subjects"].items():
        if sid not in records:
            raise DataError(f"subject {sid} missing from clinical CSV")
        splits[entry["split"]].append(sid)
        mri[sid] = read_volume(os.path.join(root, entry["mri"]))
        pet[sid] = read_volume(os.path.join(root, entry["pet"]))
        severities[sid] = float(entry.get("severity", math.nan))
    for name in SPLIT_NAMES:
        splits[name].sort()

    return Dataset(
        root=root,
        size=tuple(manifest["size"]),
        phantom=phantom,
        roi_mask=roi,
        records=records,
        splits=splits,
        mri=mri,
        pet=pet,
        severities=severities,
    )
