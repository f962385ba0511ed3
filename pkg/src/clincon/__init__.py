"""Clinically supervised contrastive pretraining at desk scale."""

from clincon.data import Dataset, Sample, load_manifest, split_by_identity, write_manifest
from clincon.errors import ClinconError, DataError, NumericError
from clincon.losses import LossResult, LossSpec, clinical_supcon, combined_clinical, info_nce
from clincon.metrics import MetricReport, auroc, paired_t_test
from clincon.synthetic import CohortConfig, generate_cohort
from clincon.train import (
    ClassifierState,
    EncoderConfig,
    EncoderState,
    HyperParams,
    distill,
    predict,
    pretrain_contrastive,
    train_linear_probe,
)

__version__ = "0.1.0"
