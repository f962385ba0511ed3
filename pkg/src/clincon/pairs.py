"""Two-view batches and positive-pair masks built from clinical labels.

Batch layout is fixed: rows ``0..N-1`` hold the first view of every sample,
rows ``N..2N-1`` the second view, so the twin of row ``i`` is ``(i + N) mod 2N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from clincon.data import BIOMARKER_NAMES, Sample, check_clinical_key
from clincon.errors import DataError

DEFAULT_BIN_WIDTHS: dict[str, float] = {"bcva": 1.0, "cst": 1.0}
NUMERIC_KEYS = {"bcva", "cst", "visit_index", "leakage_index", "drss", "diabetes_years"}


def quantize_label(value: float, key: str, bin_width: float = 1.0) -> float:
    if not bin_width > 0:
        raise DataError(f"bin_width must be > 0, got {bin_width}")
    if not math.isfinite(value):
        raise DataError(f"cannot quantize non-finite {key} value {value!r}")
    return math.floor(value / bin_width) * bin_width


def encode_labels(values: Sequence, key: str, bin_width: float | None = None) -> np.ndarray:
    """Map raw clinical values to integer codes; equal codes mean equal labels.

    Numeric keys are quantized first (default widths give exact matching).
    """
    name = check_clinical_key(key)
    if name in NUMERIC_KEYS:
        width = bin_width if bin_width is not None else DEFAULT_BIN_WIDTHS.get(name, 1.0)
        values = [quantize_label(float(v), name, width) for v in values]
    _, codes = np.unique(np.asarray(values), return_inverse=True)
    return codes.astype(np.int64).reshape(-1)


@dataclass(frozen=True)
class Augmenter:
    """Additive Gaussian noise followed by random coordinate dropout."""

    noise_sigma: float = 0.1
    dropout: float = 0.1

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = x
        if self.noise_sigma > 0:
            out = out + (self.noise_sigma * rng.standard_normal(x.shape)).astype(x.dtype)
        if self.dropout > 0:
            keep = rng.uniform(size=x.shape) >= self.dropout
            out = out * keep
        return out.astype(x.dtype, copy=False)


IDENTITY = Augmenter(0.0, 0.0)


def twin_index(n: int) -> np.ndarray:
    return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


@dataclass(frozen=True)
class TwoViewBatch:
    views: np.ndarray  # 2N x p
    twin_index: np.ndarray  # 2N
    labels: Mapping[str, np.ndarray]  # key -> 2N integer codes
    biomarkers: np.ndarray | None = None  # 2N x 16, when every sample is labeled
    sample_ids: tuple[str, ...] = ()


def two_views(x: np.ndarray, augmenter: Augmenter, rng: np.random.Generator) -> np.ndarray:
    """Stack two independent augmentations of ``x`` as ``[view1; view2]``."""
    return np.concatenate([augmenter(x, rng), augmenter(x, rng)])


def build_two_view_batch(
    samples: Sequence[Sample],
    augmenter: Augmenter,
    keys: Sequence[str],
    seed: int,
    bin_widths: Mapping[str, float] | None = None,
) -> TwoViewBatch:
    n = len(samples)
    if n < 2:
        raise DataError(f"a two-view batch needs at least 2 samples, got {n}")
    bin_widths = dict(bin_widths or {})
    x = np.stack([s.payload for s in samples])
    views = two_views(x, augmenter, np.random.default_rng(seed))
    labels = {}
    for key in keys:
        codes = encode_labels([s.clinical.value(key) for s in samples], key, bin_widths.get(key))
        labels[key] = np.concatenate([codes, codes])
    bio = None
    if all(s.biomarkers is not None for s in samples):
        flags = np.array([s.biomarkers.flags for s in samples], dtype=np.int64)
        bio = np.concatenate([flags, flags])
        assert bio.shape[1] == len(BIOMARKER_NAMES)
    return TwoViewBatch(views, twin_index(n), labels, bio, tuple(s.id for s in samples))


@dataclass(frozen=True)
class PairMask:
    positives: np.ndarray  # 2N x 2N bool, C(i)
    valid: np.ndarray  # 2N x 2N bool, A(i)

    @property
    def size(self) -> int:
        return self.positives.shape[0]

    def to_bits(self) -> dict:
        """Row-major packed-bit encoding, used for frozen test fixtures."""
        return {
            "n": self.size,
            "positives": np.packbits(self.positives.reshape(-1)).tobytes().hex(),
            "valid": np.packbits(self.valid.reshape(-1)).tobytes().hex(),
        }

    @classmethod
    def from_bits(cls, d: dict) -> "PairMask":
        n = int(d["n"])

        def unpack(h):
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(h), dtype=np.uint8))[: n * n]
            return bits.astype(bool).reshape(n, n)

        return cls(unpack(d["positives"]), unpack(d["valid"]))


def positive_mask(labels: Sequence) -> PairMask:
    labels = np.asarray(labels)
    n = labels.shape[0]
    off = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & off
    return PairMask(positives, off)


def twin_mask(n_views: int) -> PairMask:
    """Mask whose only positive for each anchor is its augmented twin."""
    return positive_mask(np.concatenate([np.arange(n_views // 2)] * 2))
