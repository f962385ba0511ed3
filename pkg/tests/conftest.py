from __future__ import annotations

import numpy as np
import pytest

from clincon.data import BiomarkerVector, ClinicalRecord, Dataset, Sample
from clincon.synthetic import BiomarkerSpec, CohortConfig, generate_cohort


def make_sample(sid, eye="E0", patient="P0", bcva=70, cst=300, visit=0, payload=None, dim=4, biomarkers=None):
    if payload is None:
        payload = np.arange(dim, dtype=np.float32) + len(sid)
    bio = None if biomarkers is None else BiomarkerVector.from_mapping(biomarkers)
    return Sample(sid, payload, ClinicalRecord(patient, eye, visit, bcva, cst), bio)


def make_dataset(samples, dim=4):
    return Dataset(tuple(samples), dim, "test")


def tiny_cohort_config(seed=0, **overrides) -> CohortConfig:
    base = dict(
        n_eyes=12,
        visits_per_eye=6,
        payload_dim=20,
        biomarker_specs=(
            BiomarkerSpec("DME", 0.4, 0.0, "low", 5, 1.0),
            BiomarkerSpec("PAVF", 0.6, 0.0, "high", 1, 2.0),
        ),
        seed=seed,
    )
    base.update(overrides)
    return CohortConfig(**base)


@pytest.fixture(scope="session")
def tiny_cohort():
    ds, gt = generate_cohort(tiny_cohort_config(seed=3))
    return ds, gt


@pytest.fixture(scope="session")
def separable_cohort():
    """Cohort where DME shifts a quarter of the payload strongly."""
    cfg = tiny_cohort_config(
        seed=5, n_eyes=20, visits_per_eye=8, payload_dim=16,
        biomarker_specs=(BiomarkerSpec("DME", 0.5, 0.0, "low", 8, 6.0),),
        eye_sigma=0.3, scan_sigma=0.3,
    )
    return generate_cohort(cfg)[0]
