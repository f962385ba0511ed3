"""Acceptance criteria 1-11, one test each, each printing a PASS/FAIL line."""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from clincon.cli import main as cli_main
from clincon.data import balanced_biomarker_testset, split_by_identity
from clincon.experiments import HIGH, granularity_cohort, prepare_split, run_access_experiment, run_granularity_experiment
from clincon.losses import (
    LossSpec,
    bce_multilabel,
    clinical_supcon,
    combined_clinical,
    cross_entropy,
    distillation_loss,
    info_nce,
)
from clincon.metrics import auroc
from clincon.pairs import positive_mask, twin_index
from clincon.synthetic import BiomarkerSpec, CohortConfig, generate_cohort
from clincon.theory import decompose_loss, linear_unit_map, make_clinical_proxy, run_proxy_sweep, sample_latent_task
from clincon.train import HyperParams, distill, pretrain_contrastive, train_linear_probe

import oracles
from conftest import make_dataset, make_sample, tiny_cohort_config
from test_losses import FIXTURES, evaluate_fixture, oracle_fixture_value


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for the criterion, then fail the test if it did not pass."""

    def report(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return report


def relative_grad_error(fn, x, analytic) -> float:
    numeric = oracles.central_difference(fn, x, h=1e-6)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    return float(np.abs(analytic - numeric).max() / scale) if scale else 0.0


def test_c1_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    worst = {}
    start = time.perf_counter()
    for _ in range(100):
        z = rng.standard_normal((8, 4))
        labels = np.concatenate([rng.integers(0, 3, 4)] * 2)
        other = np.concatenate([rng.integers(0, 2, 4)] * 2)
        m1, m2 = positive_mask(labels), positive_mask(other)
        twin = twin_index(4)
        tau = float(rng.uniform(0.05, 1.0))
        logits = rng.standard_normal((4, 5)) * 2
        teacher = rng.standard_normal((4, 5)) * 2
        classes = rng.integers(0, 5, 4)
        targets = rng.integers(0, 2, (4, 5))
        T = float(rng.uniform(0.5, 4.0))
        cases = {
            "info_nce": (lambda x: info_nce(x, twin, tau), z),
            "clinical_supcon": (lambda x: clinical_supcon(x, m1, tau), z),
            "combined_clinical": (lambda x: combined_clinical(x, [(m1, 1.0), (m2, 0.5)], tau), z),
            "cross_entropy": (lambda x: cross_entropy(x, classes), logits),
            "bce_multilabel": (lambda x: bce_multilabel(x, targets), logits),
            "distillation_loss": (lambda x: distillation_loss(x, teacher, T), logits),
        }
        for name, (fn, x) in cases.items():
            err = relative_grad_error(lambda v: fn(v).value, x, fn(x).grad)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 10.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max rel err {detail}; {elapsed:.1f}s")


def test_c2_loss_oracle_equivalence(verdict):
    small = [fx for fx in FIXTURES if fx["kind"] != "contrastive" or len(fx["z"]) <= 8]
    errors = {fx["name"]: abs(evaluate_fixture(fx)[0] - oracle_fixture_value(fx)) for fx in small}
    # random batches of every size up to 2N = 8 on top of the frozen fixtures
    rng = np.random.default_rng(7)
    for n in (1, 2, 3, 4):
        for _ in range(10):
            z = oracles.unit_rows(rng.standard_normal((2 * n, 3)))
            labels = np.concatenate([rng.integers(0, 2, n)] * 2)
            tau = float(rng.uniform(0.05, 1.0))
            got = clinical_supcon(z, positive_mask(labels), tau).value
            want = oracles.supcon_scalar(z.tolist(), labels.tolist(), tau)
            errors[f"random_2N={2 * n}"] = max(errors.get(f"random_2N={2 * n}", 0.0), abs(got - want))
    worst = max(errors.values())
    verdict(2, worst <= 1e-10, f"{len(small)} fixtures + 40 random batches, max abs err {worst:.1e}")


def test_c3_info_nce_bridge(verdict):
    rng = np.random.default_rng(3)
    worst_v = worst_g = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        z = oracles.unit_rows(rng.standard_normal((2 * n, int(rng.integers(2, 9)))))
        tau = float(rng.uniform(0.05, 1.0))
        a = info_nce(z, twin_index(n), tau)
        b = clinical_supcon(z, positive_mask(np.concatenate([np.arange(n)] * 2)), tau)
        worst_v = max(worst_v, abs(a.value - b.value))
        worst_g = max(worst_g, float(np.abs(a.grad - b.grad).max()))
    verdict(3, worst_v <= 1e-12 and worst_g <= 1e-12, f"value diff {worst_v:.1e}, grad diff {worst_g:.1e}")


def test_c4_auroc_oracle(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        # a coarse grid forces ties in most vectors
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        if auroc(scores, y) != oracles.auroc_pairs(scores.tolist(), y.tolist()):
            mismatches += 1
    verdict(4, mismatches == 0, f"{mismatches} mismatches in 1000 vectors")


def test_c5_decomposition_identity(verdict):
    rng = np.random.default_rng(5)
    worst, checked = 0.0, 0
    for _ in range(50):
        K = int(rng.integers(2, 6))
        m = int(rng.integers(2, 10))
        task = sample_latent_task(K, prior=rng.dirichlet(np.ones(K)), m=m, sigma=float(rng.uniform(0.1, 2)),
                                  seed=int(rng.integers(1 << 30)))
        proxy = make_clinical_proxy(task, float(rng.uniform(0.05, 0.95)))
        f = linear_unit_map(rng.standard_normal((m, int(rng.integers(2, 6)))))
        r = decompose_loss(f, task, proxy, 2000, float(rng.uniform(0.05, 1.0)), int(rng.integers(1 << 30)))
        if r.residual is not None:
            worst = max(worst, r.residual)
            checked += 1
    task = sample_latent_task(4, prior=(0.4, 0.3, 0.2, 0.1), m=8)
    zero = decompose_loss(linear_unit_map(np.eye(8)[:, :3]), task, make_clinical_proxy(task, 0.0), 2000)
    ok = checked == 50 and worst <= 1e-12 and zero.tau_coll == 1.0
    verdict(5, ok, f"{checked}/50 triples with both partitions, max residual {worst:.1e}, tau_coll(eps=0)={zero.tau_coll}")


def test_c6_theory_trend(verdict):
    eps = [0.0, 0.2, 0.4, 0.6, 0.8]
    start = time.perf_counter()
    rows = run_proxy_sweep(eps, seeds=(1, 2, 3))
    elapsed = time.perf_counter() - start
    mean_acc = [np.mean([r["probe_accuracy"] for r in rows if r["eps"] == e]) for e in eps]
    rho = oracles.spearman(eps, mean_acc)
    rho_rows = oracles.spearman([r["eps"] for r in rows], [r["probe_accuracy"] for r in rows])
    accs = ", ".join(f"{a:.3f}" for a in mean_acc)
    verdict(6, rho <= -0.8 and elapsed < 300,
            f"Spearman {rho:.2f} on seed means [{accs}], {rho_rows:.2f} over all 15 runs; {elapsed:.0f}s")


def test_c7_granularity_pattern(verdict):
    split = prepare_split(granularity_cohort(1))
    assert len(split.clinical) >= 2000 and len(split.labeled) == 600
    start = time.perf_counter()
    res = run_granularity_experiment(seeds=(1, 2, 3))
    elapsed = time.perf_counter() - start
    clin, selfsup, rand = (res.mean(m, HIGH) for m in ("cst+eye", "self", "random"))
    ok = clin - selfsup >= 0.03 and clin > rand and selfsup > rand and elapsed < 600
    verdict(7, ok, f"{HIGH} AUROC cst+eye {clin:.3f}, self {selfsup:.3f}, random {rand:.3f}; {elapsed:.0f}s")


def test_c8_biomarker_access_trend(verdict):
    fractions = [0.25, 0.5, 0.75, 1.0]
    rows = run_access_experiment(seeds=(1, 2, 3), fractions=fractions)
    means = [np.mean([r["auroc"] for r in rows if r["fraction"] == f]) for f in fractions]
    rho = oracles.spearman(fractions, means)
    pooled = oracles.spearman([r["fraction"] for r in rows], [r["auroc"] for r in rows])
    verdict(8, rho >= 0.8, f"Spearman {rho:.2f} on seed means [{', '.join(f'{m:.3f}' for m in means)}], "
                           f"{pooled:.2f} over all 12 runs")


def test_c9_frozen_encoder(verdict):
    ds, _ = generate_cohort(tiny_cohort_config(seed=9))
    labeled, unlabeled = ds.subset(range(30)), ds.subset(range(30, len(ds))).without_biomarkers()
    hp = HyperParams(batch_size=16, epochs=2)
    enc = pretrain_contrastive(ds, LossSpec.parse("cst+eye"), hp, seed=1)
    before = enc.checksum()
    after = []
    for target in ("DME", "PAVF", ["DME", "PAVF"]):
        teacher = train_linear_probe(enc, labeled, target, hp, seed=2)
        after.append(enc.checksum())
        after.append(teacher.encoder.checksum())
        for init in ("random", "teacher"):
            student = distill(teacher, labeled, unlabeled, 2.0, hp, seed=3, student_init=init)
            after.extend([enc.checksum(), student.encoder.checksum()])
    ok = all(c == before for c in after)
    verdict(9, ok, f"{len(after)} checksums compared after probe and distillation runs")


def test_c10_split_hygiene(verdict):
    rng = np.random.default_rng(10)
    overlaps = 0
    for _ in range(1000):
        n_patients = int(rng.integers(2, 15))
        samples = []
        for p in range(n_patients):
            for e in range(int(rng.integers(1, 3))):
                for v in range(int(rng.integers(1, 4))):
                    samples.append(make_sample(f"P{p}E{e}V{v}", eye=f"P{p}E{e}", patient=f"P{p}", visit=v))
        ds = make_dataset(samples)
        key = str(rng.choice(["eye", "patient"]))
        attr = "eye_id" if key == "eye" else "patient_id"
        n_ids = len({getattr(s.clinical, attr) for s in ds})
        train, test = split_by_identity(ds, key, int(rng.integers(1, n_ids)), int(rng.integers(1 << 30)))
        if {getattr(s.clinical, attr) for s in train} & {getattr(s.clinical, attr) for s in test}:
            overlaps += 1
        if len(train) + len(test) != len(ds):
            overlaps += 1
    cfg = CohortConfig(n_eyes=96, visits_per_eye=40, payload_dim=8,
                       biomarker_specs=(BiomarkerSpec("DME", 0.45, 0.0, "low", 2, 1.0),), seed=10)
    big, _ = generate_cohort(cfg)
    _, test = split_by_identity(big, "eye", 40, 10)
    bal = balanced_biomarker_testset(test, "DME", 500, 10)
    y = bal.biomarker_targets(["DME"])[:, 0]
    counts = (int(y.sum()), int(len(y) - y.sum()))
    verdict(10, overlaps == 0 and counts == (500, 500), f"{overlaps} overlapping splits in 1000; balanced counts {counts}")


def test_c11_determinism(verdict, tmp_path):
    (tmp_path / "cohort.json").write_text(json.dumps(tiny_cohort_config(seed=11, n_eyes=20).to_dict()))
    (tmp_path / "run.json").write_text(json.dumps({"hyperparams": {"batch_size": 16, "epochs": 2},
                                                   "encoder": {"hidden": [32], "rep_dim": 8}, "seed": 4}))

    def pipeline(d):
        c = ["--config", tmp_path / "run.json"]
        steps = [
            ["gen-synth", "--config", tmp_path / "cohort.json", "--out", d / "data"],
            ["split", "--data", d / "data/manifest.csv", "--holdout", 5, "--balanced", "DME", "--per-class", 5,
             "--seed", 4, "--out", d / "split"],
            ["pretrain", "--train", d / "split/train.csv", *c, "--out", d / "enc.ckpt"],
            ["probe", "--encoder", d / "enc.ckpt", "--train", d / "split/train.csv", "--target", "DME", *c,
             "--out", d / "probe.ckpt"],
            ["distill", "--teacher", d / "probe.ckpt", "--labeled", d / "split/train.csv",
             "--unlabeled", d / "split/test.csv", *c, "--out", d / "student.ckpt"],
            ["eval", "--model", d / "probe.ckpt", "--test", d / "split/test_DME.csv", "--out", d / "probe.json"],
            ["eval", "--model", d / "student.ckpt", "--test", d / "split/test_DME.csv", "--out", d / "student.json"],
        ]
        return [cli_main([str(a) for a in step]) for step in steps]

    codes = pipeline(tmp_path / "a") + pipeline(tmp_path / "b")
    artifacts = ["enc.ckpt", "probe.ckpt", "student.ckpt", "probe.json", "student.json", "data/manifest.csv"]
    differing = [f for f in artifacts if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = set(codes) == {0} and not differing
    verdict(11, ok, f"{len(artifacts)} artifacts compared across two full runs; differing: {differing or 'none'}")
