from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clincon.data import (
    BIOMARKER_NAMES,
    MANIFEST_COLUMNS,
    STUDIED_BIOMARKERS,
    BiomarkerVector,
    ClinicalRecord,
    Dataset,
    balanced_biomarker_testset,
    label_histogram,
    load_manifest,
    split_by_identity,
    subsample_fraction,
    write_manifest,
)
from clincon.errors import DataError
from clincon.synthetic import generate_cohort

from conftest import make_dataset, make_sample, tiny_cohort_config


def _write_rows(tmp_path, rows, columns=MANIFEST_COLUMNS, dim=3):
    """Write a manifest whose payloads are ``[row_index] * dim``."""
    (tmp_path / "p").mkdir(exist_ok=True)
    for i in range(len(rows)):
        np.full(dim, i, dtype="<f4").tofile(tmp_path / "p" / f"{i}.f32")
    path = tmp_path / "m.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for i, r in enumerate(rows):
            w.writerow({"payload_path": f"p/{i}.f32", **r})
    return path


def _row(sid, eye="E1", patient="P1", bcva="70", cst="300", flags=None):
    row = {"id": sid, "patient_id": patient, "eye_id": eye, "visit_index": "0", "bcva": bcva, "cst": cst}
    if flags is not None:
        row.update({f"b_{n}": str(f) for n, f in zip(BIOMARKER_NAMES, flags)})
    return row


class TestRecords:
    def test_biomarker_vector_indexing(self):
        v = BiomarkerVector.from_mapping({"DME": 1, "PAVF": 1, "7": 1})
        assert v["DME"] == 1 and v["IRF"] == 0 and v["7"] == 1
        assert v.studied() == (0, 1, 0, 0, 1)
        assert len(v.flags) == 16

    def test_biomarker_vector_rejects_non_binary(self):
        with pytest.raises(DataError):
            BiomarkerVector((2,) + (0,) * 15)

    def test_clinical_record_validation(self):
        with pytest.raises(DataError):
            ClinicalRecord("P", "E", 0, 70, 0)
        with pytest.raises(DataError):
            ClinicalRecord("P", "E", -1, 70, 300)

    def test_missing_extra_raises(self):
        rec = ClinicalRecord("P", "E", 0, 70, 300, {"drss": 43})
        assert rec.value("drss") == 43 and rec.value("eye") == "E"
        with pytest.raises(DataError):
            rec.value("gender")

    def test_dataset_rejects_duplicate_ids(self):
        with pytest.raises(DataError, match="duplicate"):
            make_dataset([make_sample("a"), make_sample("a")])

    def test_dataset_rejects_payload_dim_mismatch(self):
        with pytest.raises(DataError, match="payload dim"):
            make_dataset([make_sample("a", dim=3)], dim=4)

    def test_eye_owned_by_one_patient(self):
        with pytest.raises(DataError, match="two patients"):
            make_dataset([make_sample("a", eye="E1", patient="P1"), make_sample("b", eye="E1", patient="P2")])

    def test_payload_is_read_only(self):
        s = make_sample("a")
        with pytest.raises(ValueError):
            s.payload[0] = 1.0


class TestManifest:
    def test_three_full_rows(self, tmp_path):
        flags = [1, 0, 1] + [0] * 13
        path = _write_rows(tmp_path, [_row(f"s{i}", flags=flags) for i in range(3)])
        ds = load_manifest(path)
        assert len(ds) == 3 and ds.payload_dim == 3
        assert all(s.biomarkers is not None for s in ds)
        assert ds.samples[0].biomarkers["IRF"] == 1
        np.testing.assert_array_equal(ds.samples[2].payload, [2, 2, 2])

    def test_empty_biomarker_cells_mean_absent(self, tmp_path):
        path = _write_rows(tmp_path, [_row("a", flags=[0] * 16), _row("b")])
        ds = load_manifest(path)
        assert ds.samples[0].biomarkers is not None
        assert ds.samples[1].biomarkers is None

    def test_missing_biomarker_columns_mean_absent(self, tmp_path):
        cols = [c for c in MANIFEST_COLUMNS if not c.startswith("b_")]
        ds = load_manifest(_write_rows(tmp_path, [_row("a")], columns=cols))
        assert ds.samples[0].biomarkers is None

    def test_eye_with_two_patients(self, tmp_path):
        path = _write_rows(tmp_path, [_row("a", eye="E1", patient="P1"), _row("b", eye="E1", patient="P2")])
        with pytest.raises(DataError, match="two patients"):
            load_manifest(path)

    def test_malformed_cell_names_row_and_column(self, tmp_path):
        path = _write_rows(tmp_path, [_row("a"), _row("b", cst="thick")])
        with pytest.raises(DataError, match=r"row 3, column 'cst'"):
            load_manifest(path)

    def test_duplicate_id(self, tmp_path):
        path = _write_rows(tmp_path, [_row("a"), _row("a")])
        with pytest.raises(DataError, match=r"row 3, column 'id'.*duplicate"):
            load_manifest(path)

    def test_partial_biomarkers_rejected(self, tmp_path):
        row = _row("a", flags=[1] * 16)
        row["b_FAVF"] = ""
        with pytest.raises(DataError, match="b_FAVF"):
            load_manifest(_write_rows(tmp_path, [row]))

    def test_round_trip(self, tmp_path, tiny_cohort):
        ds, _ = tiny_cohort
        path = write_manifest(ds, tmp_path / "cohort.csv")
        back = load_manifest(path)
        assert [s.id for s in back] == [s.id for s in ds]
        np.testing.assert_array_equal(back.payloads(), ds.payloads())
        assert [s.clinical for s in back] == [s.clinical for s in ds]
        assert [s.biomarkers for s in back] == [s.biomarkers for s in ds]

    def test_write_is_deterministic(self, tmp_path, tiny_cohort):
        ds, _ = tiny_cohort
        a = write_manifest(ds, tmp_path / "a.csv").read_bytes()
        b = write_manifest(ds, tmp_path / "b.csv").read_bytes()
        assert a.replace(b"a_payloads", b"X") == b.replace(b"b_payloads", b"X")


def _cohort(n_eyes, seed=0):
    return generate_cohort(tiny_cohort_config(seed=seed, n_eyes=n_eyes, visits_per_eye=2))[0]


class TestSplit:
    def test_96_eyes_holdout_20(self):
        train, test = split_by_identity(_cohort(96), "eye", 20, seed=1)
        assert len({s.clinical.eye_id for s in train}) == 76
        assert len({s.clinical.eye_id for s in test}) == 20

    def test_holdout_zero(self, tiny_cohort):
        ds, _ = tiny_cohort
        train, test = split_by_identity(ds, "eye", 0, seed=1)
        assert len(test) == 0 and train.samples == ds.samples

    def test_same_seed_same_split(self, tiny_cohort):
        ds, _ = tiny_cohort
        a = split_by_identity(ds, "patient", 3, seed=9)
        b = split_by_identity(ds, "patient", 3, seed=9)
        assert [s.id for s in a[1]] == [s.id for s in b[1]]

    def test_holdout_too_large(self, tiny_cohort):
        ds, _ = tiny_cohort
        with pytest.raises(DataError):
            split_by_identity(ds, "eye", 12, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(holdout=st.integers(0, 10), seed=st.integers(0, 2**31), key=st.sampled_from(["eye", "patient"]))
    def test_no_identity_overlap(self, holdout, seed, key):
        ds = _cohort(24, seed=2)
        attr = "eye_id" if key == "eye" else "patient_id"
        train, test = split_by_identity(ds, key, holdout, seed)
        assert not {getattr(s.clinical, attr) for s in train} & {getattr(s.clinical, attr) for s in test}
        assert len(train) + len(test) == len(ds)
        # patient split never separates the two eyes of one patient
        if key == "patient":
            assert not {s.clinical.eye_id for s in train} & {s.clinical.eye_id for s in test}


class TestBalanced:
    def _pool(self, n_pos, n_neg):
        samples = [make_sample(f"p{i}", eye=f"E{i}", patient=f"P{i}", biomarkers={"DME": 1}) for i in range(n_pos)]
        samples += [make_sample(f"n{i}", eye=f"F{i}", patient=f"Q{i}", biomarkers={"DME": 0}) for i in range(n_neg)]
        return make_dataset(samples)

    def test_five_hundred_per_class(self):
        out = balanced_biomarker_testset(self._pool(800, 1200), "DME", 500, seed=3)
        y = out.biomarker_targets(["DME"])[:, 0]
        assert len(out) == 1000 and y.sum() == 500

    def test_one_of_each(self):
        out = balanced_biomarker_testset(self._pool(1, 1), "DME", 1, seed=0)
        assert [s.id for s in out] == ["p0", "n0"]

    def test_no_present_samples(self):
        with pytest.raises(DataError, match="0 present"):
            balanced_biomarker_testset(self._pool(0, 5), "DME", 1, seed=0)

    @settings(max_examples=30, deadline=None)
    @given(k=st.integers(1, 15), seed=st.integers(0, 10**6))
    def test_exact_counts_subset_no_duplicates(self, k, seed):
        pool = self._pool(15, 20)
        out = balanced_biomarker_testset(pool, "DME", k, seed)
        ids = [s.id for s in out]
        assert len(set(ids)) == len(ids) == 2 * k
        assert set(ids) <= {s.id for s in pool}
        assert out.biomarker_targets(["DME"]).sum() == k
        assert ids == [s.id for s in balanced_biomarker_testset(pool, "DME", k, seed)]


class TestHistogram:
    def test_counts(self):
        ds = make_dataset([
            make_sample("a", eye="E1", bcva=60), make_sample("b", eye="E2", patient="P2", bcva=60),
            make_sample("c", eye="E1", bcva=72),
        ])
        h = label_histogram(ds, "bcva")
        assert h.bins == ((60, 2, 2), (72, 1, 1))

    def test_empty(self):
        assert label_histogram(make_dataset([]), "cst").bins == ()

    def test_unknown_key(self):
        with pytest.raises(DataError):
            label_histogram(make_dataset([make_sample("a")]), "iop")

    def test_eye_counts_match_group_by(self, tiny_cohort):
        ds, _ = tiny_cohort
        h = label_histogram(ds, "cst")
        assert sum(n for _, n, _ in h.bins) == len(ds)
        for value, n_img, n_eye in h.bins:
            members = [s for s in ds if s.clinical.cst == value]
            assert n_img == len(members)
            assert n_eye == len({s.clinical.eye_id for s in members}) <= n_img
        values = [v for v, _, _ in h.bins]
        assert values == sorted(values)


class TestSubsample:
    def _big(self, n):
        return make_dataset([make_sample(f"s{i}", eye=f"E{i}", patient=f"P{i}") for i in range(n)])

    def test_quarter_of_7500(self):
        assert len(subsample_fraction(self._big(7500), 0.25, seed=0)) == 1875

    def test_full_fraction_identity(self):
        ds = self._big(10)
        assert subsample_fraction(ds, 1.0, seed=4).samples == ds.samples

    def test_deterministic_and_ordered(self):
        ds = self._big(100)
        a = subsample_fraction(ds, 0.3, seed=4)
        b = subsample_fraction(ds, 0.3, seed=4)
        assert [s.id for s in a] == [s.id for s in b]
        idx = [int(s.id[1:]) for s in a]
        assert idx == sorted(idx) and len(idx) == 30

    def test_min_one(self):
        assert len(subsample_fraction(self._big(3), 0.01, seed=0)) == 1

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
    def test_out_of_range(self, f):
        with pytest.raises(DataError):
            subsample_fraction(self._big(3), f)


def test_studied_subset_order():
    assert STUDIED_BIOMARKERS == ("IRF", "DME", "IRHRF", "FAVF", "PAVF")
    assert BIOMARKER_NAMES[:5] == STUDIED_BIOMARKERS
