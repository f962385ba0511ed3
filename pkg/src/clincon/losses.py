"""Training objectives with closed-form gradients.

All contrastive losses take a ``2N x d`` matrix of embeddings that are
expected to be unit norm (see :func:`normalize`) and return a
:class:`LossResult` whose ``grad`` has the same shape as the input.
Kernels preserve the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from clincon.errors import DataError, NumericError
from clincon.pairs import PairMask

EPS_NORM = 1e-12


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    contributing_anchors: int = 0


@dataclass(frozen=True)
class LossSpec:
    """Weighted sum of contrastive terms; key ``"self"`` means InfoNCE."""

    terms: tuple[tuple[str, float], ...]
    temperature: float = 0.07
    reduction: str = "mean"
    bin_widths: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((str(k), float(w)) for k, w in self.terms))
        object.__setattr__(self, "bin_widths", tuple((str(k), float(w)) for k, w in dict(self.bin_widths).items()))
        if not self.terms:
            raise DataError("a loss spec needs at least one term")
        for key, w in self.terms:
            if not (np.isfinite(w) and w > 0):
                raise DataError(f"weight for {key!r} must be finite and positive, got {w}")
        if not self.temperature > 0:
            raise DataError(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in ("mean", "sum"):
            raise DataError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    @property
    def keys(self) -> list[str]:
        return [k for k, _ in self.terms]

    @property
    def clinical_keys(self) -> list[str]:
        return [k for k, _ in self.terms if k != "self"]

    @classmethod
    def parse(cls, text: str, **kw) -> "LossSpec":
        """Parse ``"bcva:1+cst:2"``-style strings; ``simclr`` is an alias of ``self``."""
        terms = []
        for part in text.lower().split("+"):
            part = part.strip()
            if not part:
                raise DataError(f"empty term in loss spec {text!r}")
            key, _, weight = part.partition(":")
            key = {"simclr": "self", "infonce": "self", "eyeid": "eye"}.get(key.strip(), key.strip())
            try:
                w = float(weight) if weight else 1.0
            except ValueError:
                raise DataError(f"bad weight in loss spec term {part!r}") from None
            terms.append((key, w))
        return cls(tuple(terms), **kw)

    def to_dict(self) -> dict:
        return {
            "terms": [list(t) for t in self.terms],
            "temperature": self.temperature,
            "reduction": self.reduction,
            "bin_widths": dict(self.bin_widths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(
            tuple(tuple(t) for t in d["terms"]),
            d.get("temperature", 0.07),
            d.get("reduction", "mean"),
            tuple(d.get("bin_widths", {}).items()),
        )


def normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale rows to unit norm. Returns ``(z, norms)``; norms feed :func:`normalize_backward`."""
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise NumericError("non-finite row norm; cannot normalize")
    if np.any(norms <= EPS_NORM):
        bad = int(np.argmax(norms.reshape(-1) <= EPS_NORM))
        raise NumericError(f"row {bad} has norm <= {EPS_NORM}; cannot normalize")
    return x / norms, norms


def normalize_backward(z: np.ndarray, norms: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx = (I - z z^T) / |x|
    return (grad_z - np.sum(grad_z * z, axis=1, keepdims=True) * z) / norms


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise DataError(f"temperature must be > 0, got {tau}")


def _log_softmax_offdiag(z: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Similarity logits and the log-softmax over A(i) = {a != i}, per row."""
    n = z.shape[0]
    logits = (z @ z.T) / tau
    masked = logits.copy()
    np.fill_diagonal(masked, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    shifted = masked - row_max
    log_prob = (logits - row_max) - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob[np.arange(n), np.arange(n)] = 0.0
    return logits, log_prob


def _reduce_weights(active: np.ndarray, reduction: str, dtype) -> np.ndarray:
    count = int(active.sum())
    w = active.astype(dtype)
    if reduction == "mean" and count > 0:
        w = w / count
    return w


def _contrastive_grad(z: np.ndarray, g_logits: np.ndarray, tau: float) -> np.ndarray:
    # logits = z z^T / tau, so dL/dz = (G + G^T) z / tau
    return ((g_logits + g_logits.T) @ z) / tau


def info_nce(z: np.ndarray, twin: np.ndarray, tau: float = 0.07, reduction: str = "mean") -> LossResult:
    _check_tau(tau)
    n = z.shape[0]
    if n < 4:
        raise DataError(f"info_nce needs 2N >= 4 embeddings, got {n}")
    twin = np.asarray(twin)
    _, log_prob = _log_softmax_offdiag(z, tau)
    rows = np.arange(n)
    per_anchor = -log_prob[rows, twin]
    w = _reduce_weights(np.ones(n, dtype=bool), reduction, z.dtype)
    value = float(np.sum(w * per_anchor))

    softmax = np.exp(log_prob)
    softmax[rows, rows] = 0.0
    g = softmax
    g[rows, twin] -= 1.0
    g *= w[:, None]
    return LossResult(max(value, 0.0), _contrastive_grad(z, g, tau), n)


def clinical_supcon(z: np.ndarray, mask: PairMask, tau: float = 0.07, reduction: str = "mean") -> LossResult:
    """Supervised contrastive loss with positives C(i) taken from ``mask``.

    Anchors without any positive contribute nothing and are left out of the mean.
    """
    _check_tau(tau)
    n = z.shape[0]
    pos = mask.positives
    valid = mask.valid
    if pos.shape != (n, n) or valid.shape != (n, n):
        raise DataError(f"mask shape {pos.shape} does not match {n} embeddings")
    if not np.array_equal(valid, ~np.eye(n, dtype=bool)):
        raise DataError("valid mask must be exactly the off-diagonal")
    _, log_prob = _log_softmax_offdiag(z, tau)
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    safe = np.where(active, n_pos, 1).astype(z.dtype)
    per_anchor = -(np.where(pos, log_prob, 0.0).sum(axis=1)) / safe
    w = _reduce_weights(active, reduction, z.dtype)
    value = float(np.sum(w * per_anchor))

    rows = np.arange(n)
    softmax = np.exp(log_prob)
    softmax[rows, rows] = 0.0
    g = softmax - pos / safe[:, None]
    g *= w[:, None]
    return LossResult(max(value, 0.0), _contrastive_grad(z, g, tau), int(active.sum()))


def combined_clinical(
    z: np.ndarray, masks: Sequence[tuple[PairMask, float]], tau: float = 0.07, reduction: str = "mean"
) -> LossResult:
    if not masks:
        raise DataError("combined_clinical needs at least one mask")
    value = 0.0
    grad = np.zeros_like(z)
    anchors = 0
    for mask, weight in masks:
        r = clinical_supcon(z, mask, tau, reduction)
        value += weight * r.value
        grad += weight * r.grad
        anchors = max(anchors, r.contributing_anchors)
    return LossResult(value, grad, anchors)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossResult:
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise DataError(f"labels must be {n} integers in [0, {k})")
    labels = labels.astype(np.int64)
    logp = _log_softmax(logits)
    rows = np.arange(n)
    value = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return LossResult(max(value, 0.0), grad / n, n)


def bce_multilabel(logits: np.ndarray, targets: np.ndarray) -> LossResult:
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise DataError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise DataError("bce targets must be binary")
    t = targets.astype(logits.dtype)
    # max(x, 0) - x t + log(1 + exp(-|x|)) is the stable form
    per = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    grad = (sig - t) / logits.size
    return LossResult(max(float(per.mean()), 0.0), grad, logits.shape[0])


def distillation_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0) -> LossResult:
    """Soft-label cross-entropy at temperature T; gradient w.r.t. the student only."""
    if not temperature > 0:
        raise DataError(f"distillation temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise DataError(f"student {student_logits.shape} and teacher {teacher_logits.shape} shapes differ")
    n = student_logits.shape[0]
    p_teacher = np.exp(_log_softmax(teacher_logits / temperature))
    logq = _log_softmax(student_logits / temperature)
    value = float(-(p_teacher * logq).sum(axis=1).mean())
    grad = (np.exp(logq) - p_teacher) / (temperature * n)
    return LossResult(max(value, 0.0), grad, n)


def softmax_entropy(logits: np.ndarray, temperature: float = 1.0) -> float:
    """Mean entropy of ``softmax(logits / T)``; the floor of :func:`distillation_loss`."""
    logp = _log_softmax(logits / temperature)
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())


def grad_check(loss_fn: Callable[[np.ndarray], LossResult], x: np.ndarray, h: float = 1e-6) -> float:
    """Compare the analytic gradient of ``loss_fn`` at ``x`` against central differences.

    Returns ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. the worst coordinate error relative to the gradient's scale.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(loss_fn(x).grad, dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(x).value
        flat[i] = old - h
        down = loss_fn(x).value
        flat[i] = old
        nflat[i] = (up - down) / (2 * h)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
