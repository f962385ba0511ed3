"""Two-stage training: contrastive pretraining, then a frozen-encoder linear head.

Also hosts the end-to-end supervised baseline, teacher-student distillation,
prediction and embedding export. Everything is deterministic given a seed:
each routine derives independent streams for initialisation and for data
order/augmentation from one ``SeedSequence``.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from clincon.data import STUDIED_BIOMARKERS, BIOMARKER_NAMES, Dataset
from clincon.errors import DataError, NumericError
from clincon.losses import (
    LossSpec,
    bce_multilabel,
    clinical_supcon,
    cross_entropy,
    distillation_loss,
    info_nce,
    normalize,
    normalize_backward,
)
from clincon.nn import DTYPE, MLP, SGD, load_checkpoint, params_checksum, save_checkpoint
from clincon.pairs import Augmenter, encode_labels, positive_mask, twin_index, two_views

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    batch_size: int = 128
    epochs: int = 25
    momentum: float = 0.9
    lr_pretrain: float = 0.05
    weight_decay: float = 1e-4
    lr_probe: float = 0.001
    temperature: float = 0.07
    aug_noise: float = 0.1
    aug_dropout: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise DataError("batch_size must be >= 1 and epochs >= 0")
        if min(self.lr_pretrain, self.lr_probe, self.weight_decay, self.momentum) < 0:
            raise DataError("learning rates, momentum and weight decay must be >= 0")
        if not self.temperature > 0:
            raise DataError("temperature must be > 0")
        if self.aug_noise < 0 or not (0 <= self.aug_dropout < 1):
            raise DataError("aug_noise must be >= 0 and aug_dropout in [0, 1)")

    @property
    def augmenter(self) -> Augmenter:
        return Augmenter(self.aug_noise, self.aug_dropout)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EncoderConfig:
    payload_dim: int
    hidden: tuple[int, ...] = (256,)
    rep_dim: int = 64
    head_hidden: int | None = None
    proj_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def encoder_sizes(self) -> list[int]:
        return [self.payload_dim, *self.hidden, self.rep_dim]

    @property
    def head_sizes(self) -> list[int]:
        # one hidden layer, as in the reference projection head
        return [self.rep_dim, self.head_hidden or self.rep_dim, self.proj_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "hidden": tuple(d.get("hidden", (256,)))})


def _streams(seed: int, n: int = 2) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class EncoderState:
    config: EncoderConfig
    encoder: MLP
    head: MLP | None
    meta: dict[str, Any] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, config: EncoderConfig, seed: int, with_head: bool = True) -> "EncoderState":
        rng, _ = _streams(seed)
        encoder = MLP(config.encoder_sizes, final_relu=True, rng=rng)
        head = MLP(config.head_sizes, final_relu=False, rng=rng) if with_head else None
        return cls(config, encoder, head, {"seed": seed, "trained": False})

    def represent(self, x: np.ndarray) -> np.ndarray:
        return self.encoder(np.asarray(x, dtype=DTYPE))

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.head is None:
            raise DataError("this encoder has no projection head")
        return self.head(self.represent(x))

    def checksum(self) -> str:
        return params_checksum(self.encoder.params)

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}encoder.{i}": p for i, p in enumerate(self.encoder.params)}
        if self.head is not None:
            out.update({f"{prefix}head.{i}": p for i, p in enumerate(self.head.params)})
        return out

    def header(self) -> dict:
        return {
            "kind": "encoder",
            "config": self.config.to_dict(),
            "has_head": self.head is not None,
            # kept for reproducibility; downstream stages only use the encoder
            "head_discardable": True,
            "encoder_sha256": self.checksum(),
            "meta": self.meta,
            "history": self.history,
        }

    def save(self, path: str | os.PathLike) -> str:
        return save_checkpoint(path, self.header(), self.arrays())

    @classmethod
    def from_parts(cls, header: dict, arrays: Mapping[str, np.ndarray], prefix: str = "") -> "EncoderState":
        config = EncoderConfig.from_dict(header["config"])
        encoder = MLP.__new__(MLP)
        encoder.sizes, encoder.final_relu = config.encoder_sizes, True
        encoder.params = [arrays[f"{prefix}encoder.{i}"].copy() for i in range(2 * (len(config.encoder_sizes) - 1))]
        head = None
        if header.get("has_head"):
            head = MLP.__new__(MLP)
            head.sizes, head.final_relu = config.head_sizes, False
            head.params = [arrays[f"{prefix}head.{i}"].copy() for i in range(2 * (len(config.head_sizes) - 1))]
        state = cls(config, encoder, head, dict(header.get("meta", {})), list(header.get("history", [])))
        if state.checksum() != header["encoder_sha256"]:
            raise DataError("encoder checksum mismatch after reload")
        return state

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EncoderState":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "encoder":
            raise DataError(f"{path}: expected an encoder checkpoint, got {header.get('kind')!r}")
        return cls.from_parts(header, arrays)


# ---------------------------------------------------------------------------
# stage 1


def clinical_label_arrays(ds: Dataset, spec: LossSpec) -> dict[str, np.ndarray]:
    widths = dict(spec.bin_widths)
    labels = {}
    for key in spec.clinical_keys:
        try:
            values = ds.clinical_values(key)
        except DataError as exc:
            raise DataError(f"pretraining needs clinical key {key!r}: {exc}") from None
        labels[key] = encode_labels(values, key, widths.get(key))
    return labels


def iter_pretrain_batches(
    x: np.ndarray, hp: HyperParams, seed: int
) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
    """Yield ``(epoch, step, indices, views)`` in the exact order training consumes them.

    Trailing batches with fewer than two samples are skipped.
    """
    _, rng = _streams(seed)
    n = x.shape[0]
    aug = hp.augmenter
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            if idx.size < 2:
                continue
            views = two_views(x[idx], aug, rng)
            yield epoch, step, idx, views
            step += 1


def contrastive_objective(
    z: np.ndarray, idx: np.ndarray, labels: Mapping[str, np.ndarray], spec: LossSpec
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Weighted sum of the LossSpec terms on one two-view batch.

    All terms share the same augmented batch; each clinical key contributes
    its own positive mask.
    """
    n = idx.size
    twins = twin_index(n)
    tau = spec.temperature
    terms: dict[str, float] = {}
    value = 0.0
    grad = np.zeros_like(z)
    for key, weight in spec.terms:
        if key == "self":
            r = info_nce(z, twins, tau, spec.reduction)
        else:
            codes = labels[key][idx]
            r = clinical_supcon(z, positive_mask(np.concatenate([codes, codes])), tau, spec.reduction)
        terms[key] = r.value
        value += weight * r.value
        grad += weight * r.grad
    return value, grad, terms


def pretrain_arrays(
    x: np.ndarray,
    labels: Mapping[str, np.ndarray],
    spec: LossSpec,
    hp: HyperParams,
    config: EncoderConfig,
    seed: int,
    on_step: Callable[[dict], None] | None = None,
) -> EncoderState:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[0] == 0:
        raise DataError("cannot pretrain on an empty dataset")
    if x.shape[1] != config.payload_dim:
        raise DataError(f"payload dim {x.shape[1]} != encoder input {config.payload_dim}")
    for key in spec.clinical_keys:
        if key not in labels:
            raise DataError(f"missing labels for clinical key {key!r}")
    state = EncoderState.initial(config, seed)
    assert state.head is not None
    params = state.encoder.params + state.head.params
    opt = SGD(params, hp.lr_pretrain, hp.momentum, hp.weight_decay,
              state.encoder.decay_mask() + state.head.decay_mask())
    for epoch, step, idx, views in iter_pretrain_batches(x, hp, seed):
        r, cache_e = state.encoder.forward(views)
        p, cache_h = state.head.forward(r)
        z, norms = normalize(p)
        value, gz, terms = contrastive_objective(z, idx, labels, spec)
        if not np.isfinite(value) or not np.all(np.isfinite(gz)):
            raise NumericError(f"non-finite contrastive loss at epoch {epoch}, step {step} (value={value})")
        gp = normalize_backward(z, norms, gz)
        g_head, g_r = state.head.backward(cache_h, gp)
        g_enc, _ = state.encoder.backward(cache_e, g_r)
        opt.step(g_enc + g_head)
        if not all(np.all(np.isfinite(q)) for q in params):
            raise NumericError(f"parameters diverged at epoch {epoch}, step {step}; lower the learning rate")
        entry = {"epoch": epoch, "step": step, "loss": value, "terms": terms}
        state.history.append(entry)
        if on_step is not None:
            on_step(entry)
    state.meta = {
        "seed": seed,
        "trained": True,
        "stage": "pretrain",
        "loss_spec": spec.to_dict(),
        "hyperparams": hp.to_dict(),
        "n_train": int(x.shape[0]),
    }
    return state


def pretrain_contrastive(
    train: Dataset,
    spec: LossSpec,
    hp: HyperParams = HyperParams(),
    config: EncoderConfig | None = None,
    seed: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> EncoderState:
    if len(train) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    config = config or EncoderConfig(train.payload_dim)
    labels = clinical_label_arrays(train, spec)
    return pretrain_arrays(train.payloads(), labels, spec, hp, config, seed, on_step)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class ClassifierState:
    encoder: EncoderState
    weight: np.ndarray  # D x K
    bias: np.ndarray  # K
    target: dict[str, Any]
    meta: dict[str, Any] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    @property
    def multilabel(self) -> bool:
        return self.target["kind"] == "multilabel"

    @property
    def biomarkers(self) -> list[str]:
        return list(self.target["biomarkers"])

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.encoder.config.payload_dim:
            raise DataError(f"payload dim {x.shape[-1]} != model input {self.encoder.config.payload_dim}")
        return self.encoder.represent(x) @ self.weight + self.bias

    def save(self, path: str | os.PathLike) -> str:
        header = {
            "kind": "classifier",
            "target": self.target,
            "encoder": self.encoder.header(),
            "encoder_sha256": self.encoder.checksum(),
            "meta": self.meta,
            "history": self.history,
        }
        arrays = self.encoder.arrays(prefix="enc.")
        arrays["linear.weight"] = self.weight
        arrays["linear.bias"] = self.bias
        return save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClassifierState":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "classifier":
            raise DataError(f"{path}: expected a classifier checkpoint, got {header.get('kind')!r}")
        enc = EncoderState.from_parts(header["encoder"], arrays, prefix="enc.")
        return cls(enc, arrays["linear.weight"].copy(), arrays["linear.bias"].copy(), header["target"],
                   dict(header.get("meta", {})), list(header.get("history", [])))


def resolve_target(target: str | Sequence[str]) -> dict[str, Any]:
    if isinstance(target, str):
        if target.lower() == "multilabel":
            return {"kind": "multilabel", "biomarkers": list(STUDIED_BIOMARKERS)}
        if target not in BIOMARKER_NAMES:
            raise DataError(f"unknown biomarker target {target!r}")
        return {"kind": "single", "biomarkers": [target]}
    names = list(target)
    if len(names) == 1:
        return resolve_target(names[0])
    for n in names:
        if n not in BIOMARKER_NAMES:
            raise DataError(f"unknown biomarker target {n!r}")
    return {"kind": "multilabel", "biomarkers": names}


def _targets(ds: Dataset, target: dict) -> np.ndarray:
    if len(ds) == 0:
        raise DataError("labeled dataset is empty")
    t = ds.biomarker_targets(target["biomarkers"])
    return t[:, 0] if target["kind"] == "single" else t


def _head_loss(logits: np.ndarray, y: np.ndarray, multilabel: bool):
    return bce_multilabel(logits, y) if multilabel else cross_entropy(logits, y)


def _init_linear(d: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(d)
    return (rng.uniform(-bound, bound, size=(d, k)).astype(DTYPE),
            rng.uniform(-bound, bound, size=(k,)).astype(DTYPE))


def fit_linear_head(
    features: np.ndarray,
    loss: Callable[[np.ndarray, np.ndarray], Any],
    n_out: int,
    hp: HyperParams,
    lr: float,
    seed: int,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Minibatch momentum-SGD on a linear layer over fixed features.

    ``loss(logits, batch_indices)`` returns a LossResult for that batch.
    """
    init_rng, data_rng = _streams(seed)
    d = features.shape[1]
    W, b = init if init is not None else _init_linear(d, n_out, init_rng)
    W, b = W.astype(DTYPE, copy=True), b.astype(DTYPE, copy=True)
    opt = SGD([W, b], lr, hp.momentum, hp.weight_decay, [True, False])
    n = features.shape[0]
    history = []
    for _ in range(hp.epochs):
        order = data_rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            f = features[idx]
            r = loss(f @ W + b, idx)
            if not np.isfinite(r.value):
                raise NumericError("non-finite loss while fitting linear head")
            opt.step([f.T @ r.grad, r.grad.sum(axis=0)])
            history.append(r.value)
    return W, b, history


def train_linear_probe(
    enc: EncoderState,
    labeled: Dataset,
    target: str | Sequence[str],
    hp: HyperParams = HyperParams(),
    seed: int = 0,
) -> ClassifierState:
    """Train a linear layer on frozen encoder features (no augmentation)."""
    tgt = resolve_target(target)
    y = _targets(labeled, tgt)
    before = enc.checksum()
    feats = enc.represent(labeled.payloads())
    multilabel = tgt["kind"] == "multilabel"
    k = len(tgt["biomarkers"]) if multilabel else 2
    W, b, hist = fit_linear_head(feats, lambda lg, idx: _head_loss(lg, y[idx], multilabel), k, hp, hp.lr_probe, seed)
    if enc.checksum() != before:
        raise AssertionError("encoder parameters changed during probe training")
    meta = {"stage": "probe", "seed": seed, "hyperparams": hp.to_dict(), "n_train": len(labeled)}
    return ClassifierState(enc, W, b, tgt, meta, hist)


def train_supervised_baseline(
    labeled: Dataset,
    target: str | Sequence[str],
    hp: HyperParams = HyperParams(),
    config: EncoderConfig | None = None,
    seed: int = 0,
) -> ClassifierState:
    """Encoder plus linear head trained end to end on biomarker labels only.

    Uses ``hp.lr_pretrain`` and single-view augmentation, mirroring the
    pretraining regime but with a supervised objective.
    """
    tgt = resolve_target(target)
    y = _targets(labeled, tgt)
    config = config or EncoderConfig(labeled.payload_dim)
    enc = EncoderState.initial(config, seed, with_head=False)
    init_rng, data_rng = _streams(seed + 1_000_003)
    multilabel = tgt["kind"] == "multilabel"
    k = len(tgt["biomarkers"]) if multilabel else 2
    W, b = _init_linear(config.rep_dim, k, init_rng)
    params = enc.encoder.params + [W, b]
    opt = SGD(params, hp.lr_pretrain, hp.momentum, hp.weight_decay, enc.encoder.decay_mask() + [True, False])
    x = labeled.payloads()
    aug = hp.augmenter
    history = []
    for _ in range(hp.epochs):
        order = data_rng.permutation(len(x))
        for start in range(0, len(x), hp.batch_size):
            idx = order[start : start + hp.batch_size]
            r, cache = enc.encoder.forward(aug(x[idx], data_rng))
            res = _head_loss(r @ W + b, y[idx], multilabel)
            if not np.isfinite(res.value):
                raise NumericError("non-finite loss in supervised baseline")
            g_enc, _ = enc.encoder.backward(cache, res.grad @ W.T)
            opt.step(g_enc + [r.T @ res.grad, res.grad.sum(axis=0)])
            history.append(res.value)
    enc.meta = {"seed": seed, "trained": True, "stage": "supervised", "hyperparams": hp.to_dict()}
    meta = {"stage": "baseline", "seed": seed, "hyperparams": hp.to_dict(), "n_train": len(labeled)}
    return ClassifierState(enc, W, b, tgt, meta, history)


def _as_binary_pairs(logits: np.ndarray) -> np.ndarray:
    # each sigmoid logit x becomes the two-class logit pair (0, x)
    flat = logits.reshape(-1, 1)
    return np.concatenate([np.zeros_like(flat), flat], axis=1)


def distill(
    teacher: ClassifierState,
    labeled: Dataset,
    unlabeled: Dataset,
    temperature: float = 1.0,
    hp: HyperParams = HyperParams(),
    seed: int = 0,
    student_init: str = "random",
) -> ClassifierState:
    """Train a student linear head on the teacher's softened outputs.

    The student shares the teacher's frozen encoder and sees the labeled
    subset plus the unlabeled pool; only teacher logits are used as targets.
    """
    dim = teacher.encoder.config.payload_dim
    for name, ds in (("labeled", labeled), ("unlabeled", unlabeled)):
        if len(ds) and ds.payload_dim != dim:
            raise DataError(f"{name} payload dim {ds.payload_dim} != teacher input {dim}")
    x = np.concatenate([labeled.payloads().reshape(-1, dim), unlabeled.payloads().reshape(-1, dim)])
    if x.shape[0] == 0:
        raise DataError("distillation needs at least one sample")
    enc = teacher.encoder
    before = enc.checksum()
    feats = enc.represent(x)
    teacher_logits = feats @ teacher.weight + teacher.bias
    multilabel = teacher.multilabel

    def loss(lg, idx):
        t = teacher_logits[idx]
        if not multilabel:
            return distillation_loss(lg, t, temperature)
        r = distillation_loss(_as_binary_pairs(lg), _as_binary_pairs(t), temperature)
        r.grad = r.grad[:, 1].reshape(lg.shape)
        return r

    if student_init == "teacher":
        init = (teacher.weight, teacher.bias)
    elif student_init == "random":
        init = None
    else:
        raise DataError(f"student_init must be 'random' or 'teacher', got {student_init!r}")
    W, b, hist = fit_linear_head(feats, loss, teacher.weight.shape[1], hp, hp.lr_probe, seed, init)
    if enc.checksum() != before:
        raise AssertionError("encoder parameters changed during distillation")
    meta = {"stage": "distill", "seed": seed, "temperature": temperature, "hyperparams": hp.to_dict(),
            "n_labeled": len(labeled), "n_unlabeled": len(unlabeled)}
    return ClassifierState(enc, W, b, dict(teacher.target), meta, hist)


def predict(model: ClassifierState, samples: Dataset | np.ndarray) -> np.ndarray:
    """Positive-class probabilities: shape (N,) for one biomarker, (N, K) for multi-label."""
    x = samples.payloads() if isinstance(samples, Dataset) else np.asarray(samples)
    if x.ndim == 1:
        x = x[None, :]
    lg = model.logits(x).astype(np.float64)
    if model.multilabel:
        return 0.5 * (1.0 + np.tanh(0.5 * lg))
    lg = lg - lg.max(axis=1, keepdims=True)
    p = np.exp(lg)
    return p[:, 1] / p.sum(axis=1)


def export_embeddings(enc: EncoderState, samples: Dataset, out_path: str | os.PathLike,
                      layer: str = "representation") -> Path:
    """Write ``id, b_<studied biomarker>..., e0..e{D-1}`` rows; flags are blank when unlabeled."""
    x = samples.payloads()
    if layer == "representation":
        emb = enc.represent(x)
    elif layer == "projection":
        emb = enc.project(x)
    else:
        raise DataError(f"layer must be 'representation' or 'projection', got {layer!r}")
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = emb.shape[1] if emb.ndim == 2 else 0
        w.writerow(["id", *(f"b_{n}" for n in STUDIED_BIOMARKERS), *(f"e{i}" for i in range(dim))])
        for s, row in zip(samples.samples, emb):
            flags = [""] * len(STUDIED_BIOMARKERS) if s.biomarkers is None else [str(f) for f in s.biomarkers.studied()]
            w.writerow([s.id, *flags, *(f"{float(v):.9g}" for v in row)])
    return out_path
