"""Domain types, manifest I/O, identity-aware splits and label histograms.

A manifest is a CSV file with one row per scan. Payloads (the stand-in for
the OCT image) live in sidecar files of little-endian float32 values.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from clincon.errors import DataError

STUDIED_BIOMARKERS: tuple[str, ...] = ("IRF", "DME", "IRHRF", "FAVF", "PAVF")
BIOMARKER_NAMES: tuple[str, ...] = STUDIED_BIOMARKERS + tuple(str(i) for i in range(5, 16))

EXTRA_FIELDS: dict[str, type] = {
    "leakage_index": float,
    "drss": int,
    "diabetes_type": str,
    "diabetes_years": float,
    "gender": str,
}

MANIFEST_COLUMNS: tuple[str, ...] = (
    ("id", "patient_id", "eye_id", "visit_index", "bcva", "cst")
    + tuple(EXTRA_FIELDS)
    + ("payload_path",)
    + tuple(f"b_{name}" for name in BIOMARKER_NAMES)
)

REQUIRED_COLUMNS = ("id", "patient_id", "eye_id", "visit_index", "bcva", "cst", "payload_path")

KEY_ALIASES = {"eye": "eye_id", "patient": "patient_id", "visit": "visit_index"}


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    eye_id: str
    visit_index: int
    bcva: int
    cst: int
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.visit_index < 0:
            raise DataError(f"visit_index must be >= 0, got {self.visit_index}")
        if self.bcva < 0:
            raise DataError(f"bcva must be >= 0, got {self.bcva}")
        if self.cst <= 0:
            raise DataError(f"cst must be > 0, got {self.cst}")
        unknown = set(self.extras) - set(EXTRA_FIELDS)
        if unknown:
            raise DataError(f"unknown clinical extras: {sorted(unknown)}")

    def value(self, key: str) -> Any:
        """Look up a clinical value by key (``eye``/``patient`` are accepted aliases)."""
        name = KEY_ALIASES.get(key, key)
        if name in ("patient_id", "eye_id", "visit_index", "bcva", "cst"):
            return getattr(self, name)
        if name in EXTRA_FIELDS:
            if name not in self.extras:
                raise DataError(f"clinical key {key!r} missing on record for eye {self.eye_id}")
            return self.extras[name]
        raise DataError(f"unknown clinical key {key!r}")


@dataclass(frozen=True)
class BiomarkerVector:
    flags: tuple[int, ...]

    def __post_init__(self):
        if len(self.flags) != len(BIOMARKER_NAMES):
            raise DataError(f"expected {len(BIOMARKER_NAMES)} biomarker flags, got {len(self.flags)}")
        if any(f not in (0, 1) for f in self.flags):
            raise DataError(f"biomarker flags must be 0/1, got {self.flags}")

    @classmethod
    def from_mapping(cls, present: Mapping[str, int]) -> "BiomarkerVector":
        unknown = set(present) - set(BIOMARKER_NAMES)
        if unknown:
            raise DataError(f"unknown biomarkers: {sorted(unknown)}")
        return cls(tuple(int(present.get(name, 0)) for name in BIOMARKER_NAMES))

    def __getitem__(self, name: str) -> int:
        try:
            return self.flags[BIOMARKER_NAMES.index(name)]
        except ValueError:
            raise DataError(f"unknown biomarker {name!r}") from None

    def studied(self) -> tuple[int, ...]:
        return self.flags[: len(STUDIED_BIOMARKERS)]


@dataclass(frozen=True)
class Sample:
    id: str
    payload: np.ndarray
    clinical: ClinicalRecord
    biomarkers: BiomarkerVector | None = None

    def __post_init__(self):
        payload = np.asarray(self.payload, dtype=np.float32)
        if payload.ndim != 1:
            raise DataError(f"sample {self.id}: payload must be a flat vector")
        payload.setflags(write=False)
        object.__setattr__(self, "payload", payload)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    payload_dim: int
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        eye_owner: dict[str, str] = {}
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.payload.shape[0] != self.payload_dim:
                raise DataError(
                    f"sample {s.id}: payload dim {s.payload.shape[0]} != dataset dim {self.payload_dim}"
                )
            owner = eye_owner.setdefault(s.clinical.eye_id, s.clinical.patient_id)
            if owner != s.clinical.patient_id:
                raise DataError(
                    f"eye {s.clinical.eye_id!r} maps to two patients: {owner!r} and {s.clinical.patient_id!r}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, indices: Iterable[int], provenance: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.samples[i] for i in indices),
            self.payload_dim,
            self.provenance if provenance is None else provenance,
        )

    def payloads(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.payload_dim), dtype=np.float32)
        return np.stack([s.payload for s in self.samples])

    def clinical_values(self, key: str) -> list:
        return [s.clinical.value(key) for s in self.samples]

    def biomarker_targets(self, names: Sequence[str]) -> np.ndarray:
        """Return an N x len(names) 0/1 matrix; raises if any sample lacks labels."""
        out = np.zeros((len(self.samples), len(names)), dtype=np.int64)
        for i, s in enumerate(self.samples):
            if s.biomarkers is None:
                raise DataError(f"sample {s.id} has no biomarker labels")
            out[i] = [s.biomarkers[n] for n in names]
        return out

    def labeled(self) -> "Dataset":
        return self.subset(i for i, s in enumerate(self.samples) if s.biomarkers is not None)

    def without_biomarkers(self) -> "Dataset":
        return Dataset(tuple(replace(s, biomarkers=None) for s in self.samples), self.payload_dim, self.provenance)


@dataclass(frozen=True)
class Histogram:
    key: str
    bins: tuple[tuple[Any, int, int], ...]


# ---------------------------------------------------------------------------
# manifest I/O


def _parse_cell(raw: str, kind: type, row: int, column: str):
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        return raw
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: cannot parse {raw!r} as {kind.__name__}") from None


def load_manifest(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    samples: list[Sample] = []
    dim: int | None = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        bio_cols = [(name, f"b_{name}") for name in BIOMARKER_NAMES if f"b_{name}" in header]
        seen: set[str] = set()
        # data rows start on line 2 of the file
        for row_no, row in enumerate(reader, start=2):
            for col in REQUIRED_COLUMNS:
                if not (row.get(col) or "").strip():
                    raise DataError(f"row {row_no}, column {col!r}: empty value")
            sid = row["id"].strip()
            if sid in seen:
                raise DataError(f"row {row_no}, column 'id': duplicate id {sid!r}")
            seen.add(sid)
            extras = {}
            for name, kind in EXTRA_FIELDS.items():
                raw = (row.get(name) or "").strip()
                if raw:
                    extras[name] = _parse_cell(raw, kind, row_no, name)
            try:
                clinical = ClinicalRecord(
                    patient_id=row["patient_id"].strip(),
                    eye_id=row["eye_id"].strip(),
                    visit_index=_parse_cell(row["visit_index"].strip(), int, row_no, "visit_index"),
                    bcva=_parse_cell(row["bcva"].strip(), int, row_no, "bcva"),
                    cst=_parse_cell(row["cst"].strip(), int, row_no, "cst"),
                    extras=extras,
                )
            except DataError as exc:
                if str(exc).startswith("row "):
                    raise
                raise DataError(f"row {row_no}: {exc}") from None

            cells = {name: (row.get(col) or "").strip() for name, col in bio_cols}
            filled = {n: c for n, c in cells.items() if c}
            biomarkers = None
            if filled:
                if len(filled) != len(cells):
                    empty = next(f"b_{n}" for n, c in cells.items() if not c)
                    raise DataError(f"row {row_no}, column {empty!r}: partially missing biomarker labels")
                flags = {}
                for name, cell in filled.items():
                    if cell not in ("0", "1"):
                        raise DataError(f"row {row_no}, column 'b_{name}': expected 0/1, got {cell!r}")
                    flags[name] = int(cell)
                biomarkers = BiomarkerVector.from_mapping(flags)

            payload_file = base / row["payload_path"].strip()
            try:
                payload = np.fromfile(payload_file, dtype="<f4")
            except OSError as exc:
                raise DataError(f"row {row_no}, column 'payload_path': {exc}") from None
            if dim is None:
                dim = payload.shape[0]
            elif payload.shape[0] != dim:
                raise DataError(
                    f"row {row_no}, column 'payload_path': payload dim {payload.shape[0]} != {dim}"
                )
            samples.append(Sample(sid, payload, clinical, biomarkers))
    try:
        return Dataset(tuple(samples), dim or 0, provenance=str(path))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_manifest(ds: Dataset, path: str | os.PathLike) -> Path:
    """Write ``ds`` as a manifest CSV plus one payload file per sample.

    Payloads go to ``<manifest stem>_payloads/`` next to the CSV.
    """
    path = Path(path)
    payload_dir = path.parent / f"{path.stem}_payloads"
    payload_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in ds.samples:
            rel = f"{payload_dir.name}/{s.id}.f32"
            s.payload.astype("<f4").tofile(path.parent / rel)
            c = s.clinical
            extras = [_format_extra(c.extras.get(name)) for name in EXTRA_FIELDS]
            if s.biomarkers is None:
                flags = [""] * len(BIOMARKER_NAMES)
            else:
                flags = [str(f) for f in s.biomarkers.flags]
            writer.writerow([s.id, c.patient_id, c.eye_id, c.visit_index, c.bcva, c.cst, *extras, rel, *flags])
    return path


def _format_extra(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# splits and sampling


def split_by_identity(ds: Dataset, key: str = "eye", holdout_count: int = 20, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Partition ``ds`` so that no eye (or patient) appears on both sides."""
    attr = {"eye": "eye_id", "eye_id": "eye_id", "patient": "patient_id", "patient_id": "patient_id"}.get(key)
    if attr is None:
        raise DataError(f"identity key must be 'eye' or 'patient', got {key!r}")
    identities = sorted({getattr(s.clinical, attr) for s in ds.samples})
    if holdout_count < 0 or holdout_count >= len(identities):
        raise DataError(
            f"holdout_count={holdout_count} must be in [0, {len(identities)}) distinct {key} identities"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(identities))
    held = {identities[i] for i in order[:holdout_count]}
    train_idx = [i for i, s in enumerate(ds.samples) if getattr(s.clinical, attr) not in held]
    test_idx = [i for i, s in enumerate(ds.samples) if getattr(s.clinical, attr) in held]
    return ds.subset(train_idx), ds.subset(test_idx)


def balanced_biomarker_testset(ds: Dataset, biomarker: str, n_per_class: int, seed: int = 0) -> Dataset:
    if biomarker not in BIOMARKER_NAMES:
        raise DataError(f"unknown biomarker {biomarker!r}")
    present = [i for i, s in enumerate(ds.samples) if s.biomarkers is not None and s.biomarkers[biomarker] == 1]
    absent = [i for i, s in enumerate(ds.samples) if s.biomarkers is not None and s.biomarkers[biomarker] == 0]
    if len(present) < n_per_class or len(absent) < n_per_class:
        raise DataError(
            f"{biomarker}: need {n_per_class} present and {n_per_class} absent samples, "
            f"have {len(present)} present and {len(absent)} absent"
        )
    rng = np.random.default_rng(seed)
    pick_p = rng.choice(len(present), size=n_per_class, replace=False)
    pick_a = rng.choice(len(absent), size=n_per_class, replace=False)
    chosen = sorted([present[i] for i in pick_p] + [absent[i] for i in pick_a])
    return ds.subset(chosen)


def subsample_fraction(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    n = len(ds)
    if n == 0:
        return ds
    # guard against 0.29 * 100 == 28.999999999999996
    k = max(1, math.floor(fraction * n + 1e-9))
    if k >= n:
        return ds
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    return ds.subset(chosen.tolist())


def check_clinical_key(key: str) -> str:
    """Return the canonical field name for ``key`` or raise."""
    name = KEY_ALIASES.get(key, key)
    if name not in ("patient_id", "eye_id", "visit_index", "bcva", "cst") and name not in EXTRA_FIELDS:
        raise DataError(f"unknown clinical key {key!r}")
    return name


def label_histogram(ds: Dataset, key: str) -> Histogram:
    check_clinical_key(key)
    images: dict[Any, int] = {}
    eyes: dict[Any, set] = {}
    for s in ds.samples:
        v = s.clinical.value(key)
        images[v] = images.get(v, 0) + 1
        eyes.setdefault(v, set()).add(s.clinical.eye_id)
    bins = tuple((v, images[v], len(eyes[v])) for v in sorted(images))
    return Histogram(key, bins)
