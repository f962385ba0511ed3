"""Desk-scale synthetic cohorts.

Every eye carries a latent disease severity ``s`` in [0, 1]. Clinical values
and biomarker flags are both functions of ``s``, which is what makes clinical
labels useful pseudo-labels for biomarker detection. How a biomarker shows up
in the payload is controlled by its granularity: low-granularity biomarkers
shift many payload coordinates, high-granularity ones shift only a handful.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from clincon.data import BIOMARKER_NAMES, BiomarkerVector, ClinicalRecord, Dataset, Sample
from clincon.errors import DataError

BCVA_RANGE = (0.0, 100.0)
CST_RANGE = (150.0, 900.0)


@dataclass(frozen=True)
class BiomarkerSpec:
    name: str
    threshold: float
    flip_prob: float = 0.0
    granularity: str = "low"
    effect_dims: int = 32
    effect_magnitude: float = 1.0


@dataclass(frozen=True)
class CohortConfig:
    n_eyes: int = 96
    visits_per_eye: int = 10
    payload_dim: int = 128
    severity_noise: float = 0.05
    clinical_noise: tuple[float, float] = (2.0, 10.0)
    biomarker_specs: tuple[BiomarkerSpec, ...] = ()
    seed: int = 0
    # std of the per-eye anatomy vector shared by all scans of one eye
    eye_sigma: float = 1.0
    # std of the per-scan noise
    scan_sigma: float = 1.0
    # low-rank per-scan nuisance (acquisition variation): rank and std
    nuisance_rank: int = 0
    nuisance_sigma: float = 0.0
    # fraction of patients contributing both eyes
    both_eyes_fraction: float = 0.1
    # fraction of scans that carry biomarker labels
    label_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "clinical_noise", tuple(float(v) for v in self.clinical_noise))
        specs = tuple(s if isinstance(s, BiomarkerSpec) else BiomarkerSpec(**s) for s in self.biomarker_specs)
        object.__setattr__(self, "biomarker_specs", specs)

    def validate(self) -> None:
        if self.n_eyes < 1 or self.visits_per_eye < 1 or self.payload_dim < 1:
            raise DataError("n_eyes, visits_per_eye and payload_dim must be positive")
        if self.nuisance_rank < 0 or self.nuisance_rank > self.payload_dim or self.nuisance_sigma < 0:
            raise DataError("nuisance_rank must be in [0, payload_dim] and nuisance_sigma >= 0")
        if self.severity_noise < 0 or min(self.clinical_noise) < 0 or self.eye_sigma < 0 or self.scan_sigma < 0:
            raise DataError("noise levels must be >= 0")
        if len(self.clinical_noise) != 2:
            raise DataError("clinical_noise must be (bcva_sigma, cst_sigma)")
        if not (0.0 <= self.both_eyes_fraction <= 1.0) or not (0.0 <= self.label_fraction <= 1.0):
            raise DataError("both_eyes_fraction and label_fraction must be in [0, 1]")
        names = [s.name for s in self.biomarker_specs]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate biomarker specs: {names}")
        total_dims = 0
        for s in self.biomarker_specs:
            if s.name not in BIOMARKER_NAMES:
                raise DataError(f"unknown biomarker {s.name!r}")
            if not (0.0 < s.threshold < 1.0):
                raise DataError(f"{s.name}: threshold must be in (0, 1)")
            if not (0.0 <= s.flip_prob < 0.5):
                raise DataError(f"{s.name}: flip_prob must be in [0, 0.5)")
            if s.granularity == "low":
                if s.effect_dims < 0.25 * self.payload_dim:
                    raise DataError(f"{s.name}: low granularity needs effect_dims >= 25% of payload_dim")
            elif s.granularity == "high":
                if s.effect_dims > 0.05 * self.payload_dim:
                    raise DataError(f"{s.name}: high granularity needs effect_dims <= 5% of payload_dim")
            else:
                raise DataError(f"{s.name}: granularity must be 'low' or 'high'")
            if s.effect_dims < 1:
                raise DataError(f"{s.name}: effect_dims must be >= 1")
            total_dims += s.effect_dims
        if total_dims > self.payload_dim:
            raise DataError(f"effect dims ({total_dims}) exceed payload_dim ({self.payload_dim})")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["clinical_noise"] = list(self.clinical_noise)
        d["biomarker_specs"] = [asdict(s) for s in self.biomarker_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CohortConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown cohort config keys: {sorted(unknown)}")
        d = dict(d)
        if "biomarker_specs" in d:
            d["biomarker_specs"] = tuple(BiomarkerSpec(**s) for s in d["biomarker_specs"])
        if "clinical_noise" in d:
            d["clinical_noise"] = tuple(d["clinical_noise"])
        return cls(**d)


def default_biomarker_specs(payload_dim: int = 128) -> tuple[BiomarkerSpec, ...]:
    """The five studied biomarkers: IRF and DME coarse, the rest fine-grained."""
    low = max(1, int(np.ceil(0.25 * payload_dim)))
    high = max(1, int(np.floor(0.03 * payload_dim)))
    return (
        BiomarkerSpec("IRF", 0.55, 0.0, "low", low, 0.6),
        BiomarkerSpec("DME", 0.45, 0.0, "low", low, 0.6),
        BiomarkerSpec("IRHRF", 0.5, 0.0, "high", high, 1.5),
        BiomarkerSpec("FAVF", 0.35, 0.0, "high", high, 1.5),
        BiomarkerSpec("PAVF", 0.65, 0.0, "high", high, 1.5),
    )


@dataclass
class GroundTruth:
    severity: np.ndarray  # n_eyes x visits_per_eye
    effect_dims: dict[str, list[int]]
    config: dict[str, Any]
    sample_ids: list[str]
    fingerprint: str
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "severity": self.severity.tolist(),
                "effect_dims": self.effect_dims,
                "config": self.config,
                "sample_ids": self.sample_ids,
                "fingerprint": self.fingerprint,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls(
            severity=np.asarray(d["severity"], dtype=np.float64),
            effect_dims={k: list(v) for k, v in d["effect_dims"].items()},
            config=d["config"],
            sample_ids=list(d["sample_ids"]),
            fingerprint=d["fingerprint"],
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GroundTruth":
        return cls.from_json(Path(path).read_text())


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    for s in ds.samples:
        h.update(s.id.encode())
        h.update(s.payload.astype("<f4").tobytes())
    return h.hexdigest()


def generate_cohort(cfg: CohortConfig) -> tuple[Dataset, GroundTruth]:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    r_sev, r_clin, r_bio, r_pay, r_dims, r_meta = [np.random.default_rng(s) for s in root.spawn(6)]

    n_eyes, n_vis, p = cfg.n_eyes, cfg.visits_per_eye, cfg.payload_dim
    base = r_sev.uniform(0.0, 1.0, size=n_eyes)
    severity = np.clip(base[:, None] + cfg.severity_noise * r_sev.standard_normal((n_eyes, n_vis)), 0.0, 1.0)

    bcva_sigma, cst_sigma = cfg.clinical_noise
    bcva = np.rint(np.clip(100.0 * (1.0 - severity) + bcva_sigma * r_clin.standard_normal(severity.shape), *BCVA_RANGE))
    cst = np.rint(np.clip(250.0 + 400.0 * severity + cst_sigma * r_clin.standard_normal(severity.shape), *CST_RANGE))

    # disjoint effect coordinates per biomarker
    perm = r_dims.permutation(p)
    effect_dims: dict[str, list[int]] = {}
    start = 0
    for spec in cfg.biomarker_specs:
        effect_dims[spec.name] = sorted(int(i) for i in perm[start : start + spec.effect_dims])
        start += spec.effect_dims

    flags: dict[str, np.ndarray] = {}
    for spec in cfg.biomarker_specs:
        present = severity > spec.threshold
        flip = r_bio.uniform(size=severity.shape) < spec.flip_prob
        flags[spec.name] = np.where(flip, ~present, present).astype(np.int64)

    anatomy = cfg.eye_sigma * r_pay.standard_normal((n_eyes, p))
    noise = cfg.scan_sigma * r_pay.standard_normal((n_eyes, n_vis, p))
    payload = anatomy[:, None, :] + noise
    if cfg.nuisance_rank:
        loadings, _ = np.linalg.qr(r_pay.standard_normal((p, cfg.nuisance_rank)))
        factors = cfg.nuisance_sigma * r_pay.standard_normal((n_eyes, n_vis, cfg.nuisance_rank))
        payload += factors @ loadings.T
    for spec in cfg.biomarker_specs:
        dims = effect_dims[spec.name]
        payload[:, :, dims] += spec.effect_magnitude * flags[spec.name][:, :, None]

    # patients: a fraction of patients own two consecutive eyes
    n_pairs = int(round(cfg.both_eyes_fraction * n_eyes / 2))
    patient_of_eye: list[int] = []
    pid = 0
    for e in range(n_eyes):
        if e < 2 * n_pairs and e % 2 == 1:
            patient_of_eye.append(patient_of_eye[-1])
        else:
            patient_of_eye.append(pid)
            pid += 1
    gender = r_meta.choice(["F", "M"], size=pid)
    dtype = r_meta.choice(["1", "2"], size=pid, p=[0.2, 0.8])
    dyears = np.round(r_meta.uniform(1.0, 30.0, size=pid), 1)
    labeled = r_meta.uniform(size=(n_eyes, n_vis)) < cfg.label_fraction
    leakage = np.round(np.clip(severity * 10.0 + r_meta.standard_normal(severity.shape), 0.0, None), 3)

    samples = []
    for e in range(n_eyes):
        patient = patient_of_eye[e]
        for v in range(n_vis):
            extras = {
                "leakage_index": float(leakage[e, v]),
                "drss": int(35 + 10 * round(4 * severity[e, v])),
                "diabetes_type": str(dtype[patient]),
                "diabetes_years": float(dyears[patient]),
                "gender": str(gender[patient]),
            }
            rec = ClinicalRecord(
                patient_id=f"P{patient:03d}",
                eye_id=f"E{e:03d}",
                visit_index=v,
                bcva=int(bcva[e, v]),
                cst=int(cst[e, v]),
                extras=extras,
            )
            bio = None
            if labeled[e, v]:
                bio = BiomarkerVector.from_mapping({name: int(f[e, v]) for name, f in flags.items()})
            samples.append(Sample(f"E{e:03d}_V{v:02d}", payload[e, v].astype(np.float32), rec, bio))

    ds = Dataset(tuple(samples), p, provenance=f"synthetic seed={cfg.seed}")
    gt = GroundTruth(
        severity=severity,
        effect_dims=effect_dims,
        config=cfg.to_dict(),
        sample_ids=[s.id for s in samples],
        fingerprint=dataset_fingerprint(ds),
    )
    return ds, gt


def ground_truth_check(ds: Dataset, gt: GroundTruth) -> dict[str, Any]:
    """Compare a generated dataset against its ground truth.

    Reports per-biomarker group means of BCVA and CST and, for biomarkers
    generated without label flips, counts violations of the threshold rule
    and of the CST separability property.
    """
    if [s.id for s in ds.samples] != gt.sample_ids or dataset_fingerprint(ds) != gt.fingerprint:
        raise DataError("dataset does not match ground truth provenance (ids, order or payloads differ)")
    cfg = CohortConfig.from_dict(gt.config)
    n_vis = cfg.visits_per_eye
    sev = gt.severity.reshape(-1)
    bcva = np.array([s.clinical.bcva for s in ds.samples], dtype=np.float64)
    cst = np.array([s.clinical.cst for s in ds.samples], dtype=np.float64)
    has = np.array([s.biomarkers is not None for s in ds.samples])

    report: dict[str, Any] = {"n_samples": len(ds), "visits_per_eye": n_vis, "biomarkers": {}, "violations": []}
    for spec in cfg.biomarker_specs:
        flags = np.array([s.biomarkers[spec.name] if s.biomarkers is not None else -1 for s in ds.samples])
        pres = has & (flags == 1)
        absn = has & (flags == 0)
        entry: dict[str, Any] = {
            "granularity": spec.granularity,
            "flip_prob": spec.flip_prob,
            "n_present": int(pres.sum()),
            "n_absent": int(absn.sum()),
            "mean_cst_present": float(cst[pres].mean()) if pres.any() else None,
            "mean_cst_absent": float(cst[absn].mean()) if absn.any() else None,
            "mean_bcva_present": float(bcva[pres].mean()) if pres.any() else None,
            "mean_bcva_absent": float(bcva[absn].mean()) if absn.any() else None,
        }
        gap = None
        if pres.any() and absn.any():
            gap = entry["mean_cst_present"] - entry["mean_cst_absent"]
        entry["cst_gap"] = gap
        expected = (sev > spec.threshold).astype(int)
        mismatches = int(np.sum(has & (flags != expected)))
        entry["threshold_mismatches"] = mismatches
        if spec.flip_prob == 0.0:
            if mismatches:
                report["violations"].append(f"{spec.name}: {mismatches} flags disagree with 1{{s > threshold}}")
            if gap is not None and gap <= 0:
                report["violations"].append(f"{spec.name}: CST gap {gap:.3f} is not positive")
        report["biomarkers"][spec.name] = entry
    return report
