"""Desk-scale experiments on synthetic cohorts.

``granularity`` compares pretraining objectives by linear-probe AUROC on a
coarse and a fine-grained biomarker; ``access`` varies how much biomarker
data the probe sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from clincon.data import Dataset, balanced_biomarker_testset, split_by_identity, subsample_fraction
from clincon.losses import LossSpec
from clincon.metrics import auroc
from clincon.synthetic import BiomarkerSpec, CohortConfig, generate_cohort
from clincon.train import EncoderConfig, EncoderState, HyperParams, predict, pretrain_contrastive, train_linear_probe

LOW, HIGH = "DME", "PAVF"


def granularity_cohort(seed: int) -> CohortConfig:
    """3500 scans from 140 eyes; DME shifts 32 of 128 coordinates, PAVF only 4.

    Every scan also carries a rank-48 acquisition nuisance, so augmentation
    invariance alone does not isolate disease structure.
    """
    return CohortConfig(
        n_eyes=140,
        visits_per_eye=25,
        payload_dim=128,
        severity_noise=0.05,
        clinical_noise=(2.0, 10.0),
        biomarker_specs=(
            BiomarkerSpec(LOW, 0.35, 0.0, "low", 32, 1.0),
            BiomarkerSpec(HIGH, 0.55, 0.0, "high", 4, 2.0),
        ),
        seed=seed,
        nuisance_rank=48,
        nuisance_sigma=2.0,
    )


@dataclass
class CohortSplit:
    clinical: Dataset  # train eyes, biomarker labels stripped
    labeled: Dataset  # train eyes, biomarker-labeled
    tests: dict[str, Dataset]  # balanced test set per biomarker, held-out eyes
    biomarkers: tuple[str, ...] = (LOW, HIGH)


def balanced_tests(test_pool: Dataset, biomarkers: Sequence[str], max_per_class: int, seed: int) -> dict[str, Dataset]:
    """Largest balanced set up to ``max_per_class`` per class, for each biomarker."""
    out = {}
    for b in biomarkers:
        y = test_pool.labeled().biomarker_targets([b])[:, 0]
        k = int(min(max_per_class, y.sum(), len(y) - y.sum()))
        out[b] = balanced_biomarker_testset(test_pool, b, k, seed)
    return out


def prepare_split(cfg: CohortConfig, n_labeled: int = 600, holdout_eyes: int = 30,
                  max_test_per_class: int = 100) -> CohortSplit:
    ds, _ = generate_cohort(cfg)
    train, test = split_by_identity(ds, "eye", holdout_eyes, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    chosen = np.zeros(len(train), dtype=bool)
    chosen[rng.choice(len(train), size=n_labeled, replace=False)] = True
    labeled = train.subset(np.flatnonzero(chosen).tolist())
    clinical = train.subset(np.flatnonzero(~chosen).tolist()).without_biomarkers()
    names = tuple(s.name for s in cfg.biomarker_specs)
    return CohortSplit(clinical, labeled, balanced_tests(test, names, max_test_per_class, cfg.seed), names)


def probe_auroc(enc: EncoderState, labeled: Dataset, test: Dataset, biomarker: str,
                hp: HyperParams, seed: int) -> float:
    clf = train_linear_probe(enc, labeled, biomarker, hp, seed)
    return auroc(predict(clf, test), test.biomarker_targets([biomarker])[:, 0])


@dataclass
class GranularityResult:
    rows: list[dict] = field(default_factory=list)  # seed, method, biomarker, auroc

    def mean(self, method: str, biomarker: str) -> float:
        vals = [r["auroc"] for r in self.rows if r["method"] == method and r["biomarker"] == biomarker]
        return float(np.mean(vals))

    def mean_over_biomarkers(self, method: str) -> float:
        return float(np.mean([r["auroc"] for r in self.rows if r["method"] == method]))


def run_granularity_experiment(
    seeds: Sequence[int] = (1, 2, 3),
    methods: Sequence[str] = ("random", "self", "cst+eye"),
    pretrain_hp: HyperParams = HyperParams(),
    probe_hp: HyperParams = HyperParams(),
) -> GranularityResult:
    """Probe AUROC per (seed, pretraining method, biomarker).

    ``random`` is an untrained frozen encoder; other methods are loss specs.
    """
    result = GranularityResult()
    for seed in seeds:
        cfg = granularity_cohort(seed)
        split = prepare_split(cfg)
        for method in methods:
            if method == "random":
                enc = EncoderState.initial(EncoderConfig(cfg.payload_dim), seed)
            else:
                spec = LossSpec.parse(method, temperature=pretrain_hp.temperature)
                enc = pretrain_contrastive(split.clinical, spec, pretrain_hp, EncoderConfig(cfg.payload_dim), seed)
            for b in split.biomarkers:
                a = probe_auroc(enc, split.labeled, split.tests[b], b, probe_hp, seed)
                result.rows.append({"seed": seed, "method": method, "biomarker": b, "auroc": a})
    return result


def run_access_sweep(
    enc: EncoderState,
    labeled: Dataset,
    tests: dict[str, Dataset],
    fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    seeds: Sequence[int] = (1, 2, 3),
    hp: HyperParams = HyperParams(),
) -> list[dict]:
    """One row per (fraction, seed): mean probe AUROC over ``tests`` plus per-biomarker columns."""
    rows = []
    for fraction in fractions:
        for seed in seeds:
            sub = subsample_fraction(labeled, fraction, seed)
            per = {b: probe_auroc(enc, sub, t, b, hp, seed) for b, t in tests.items()}
            row = {"fraction": float(fraction), "seed": int(seed), "n_labeled": len(sub),
                   "auroc": float(np.mean(list(per.values())))}
            row.update({f"auroc_{b}": v for b, v in per.items()})
            rows.append(row)
    return rows


def run_access_experiment(
    seeds: Sequence[int] = (1, 2, 3),
    fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    loss: str = "cst+eye",
    pretrain_hp: HyperParams = HyperParams(),
    probe_hp: HyperParams = HyperParams(),
) -> list[dict]:
    """Per seed: fresh cohort, one pretrained encoder, probes at every fraction."""
    rows = []
    for seed in seeds:
        cfg = granularity_cohort(seed)
        split = prepare_split(cfg)
        spec = LossSpec.parse(loss, temperature=pretrain_hp.temperature)
        enc = pretrain_contrastive(split.clinical, spec, pretrain_hp, EncoderConfig(cfg.payload_dim), seed)
        rows.extend(run_access_sweep(enc, split.labeled, split.tests, fractions, (seed,), probe_hp))
    return rows
