"""Latent-class simulation of pseudo-label quality in contrastive learning.

A :class:`LatentTask` has ``K`` classes with prior ``rho`` and Gaussian
class-conditional generators. A :class:`ClinicalProxy` corrupts the true
class into a pseudo-label; positives are drawn by matching pseudo-labels,
so their true classes may disagree. A *collision* here is a positive pair
whose members share the same true class.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from clincon.errors import DataError
from clincon.losses import LossSpec, cross_entropy
from clincon.train import EncoderConfig, HyperParams, fit_linear_head, pretrain_arrays

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class LatentTask:
    K: int
    rho: np.ndarray
    means: np.ndarray  # K x m
    sigma: float

    @property
    def m(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` points: returns ``(x, true_class)``."""
        c = rng.choice(self.K, size=n, p=self.rho)
        x = self.means[c] + self.sigma * rng.standard_normal((n, self.m))
        return x, c

    def draw(self, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.means[classes] + self.sigma * rng.standard_normal((len(classes), self.m))


def _check_simplex(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise DataError(f"{name} must be a probability vector, got {p}")
    return p / p.sum()


def sample_latent_task(K: int, prior=None, m: int = 16, sigma: float = 1.0, seed: int = 0) -> LatentTask:
    if K < 2:
        raise DataError(f"need at least 2 latent classes, got {K}")
    rho = np.full(K, 1.0 / K) if prior is None else _check_simplex(prior, "prior")
    if rho.size != K:
        raise DataError(f"prior has {rho.size} entries for K={K}")
    if sigma < 0 or m < 1:
        raise DataError("sigma must be >= 0 and m >= 1")
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal((K, m))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return LatentTask(K, rho, mu, float(sigma))


@dataclass(frozen=True)
class ClinicalProxy:
    q: np.ndarray  # K x K, row c = distribution of pseudo-label given true class c
    eps: float
    rho_clin: np.ndarray

    def posterior(self, rho: np.ndarray) -> np.ndarray:
        """P(true class | pseudo-label), as a K x K row-stochastic matrix."""
        joint = rho[:, None] * self.q  # [c, y]
        col = joint.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(col > 0, joint / col, 0.0).T
        return post


def make_clinical_proxy(task: LatentTask, eps: float) -> ClinicalProxy:
    if not (0.0 <= eps < 1.0):
        raise DataError(f"corruption eps must be in [0, 1), got {eps}")
    K = task.K
    q = (1.0 - eps) * np.eye(K) + (eps / (K - 1)) * (1.0 - np.eye(K))
    return ClinicalProxy(q, float(eps), task.rho @ q)


def kl_divergence(p, q) -> float:
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape != q.shape:
        raise DataError("distributions have different supports")
    support = p > 0
    if np.any(q[support] == 0):
        raise DataError("KL undefined: q is zero where p is positive")
    # rounding can leave a tiny negative value when p == q
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def collision_probability(task: LatentTask, proxy: ClinicalProxy) -> float:
    """Closed form: sum over pseudo-labels y of sum_c rho_c^2 q(y|c)^2 / rho_clin(y)."""
    joint = task.rho[:, None] * proxy.q
    col = joint.sum(axis=0)
    keep = col > 0
    return float(np.sum((joint[:, keep] ** 2).sum(axis=0) / col[keep]))


def sample_positive_pairs(task: LatentTask, proxy: ClinicalProxy, n: int, rng: np.random.Generator):
    """Anchor class, its pseudo-label, and the true class of a pseudo-label-matched positive."""
    anchor = rng.choice(task.K, size=n, p=task.rho)
    cum_q = np.cumsum(proxy.q, axis=1)
    pseudo = _row_choice(cum_q[anchor], rng)
    post = proxy.posterior(task.rho)
    positive = _row_choice(np.cumsum(post, axis=1)[pseudo], rng)
    return anchor, pseudo, positive


def _row_choice(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(size=(cum.shape[0], 1))
    idx = (u >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def collision_rate(task: LatentTask, proxy: ClinicalProxy, n_pairs: int, seed: int = 0) -> float:
    if n_pairs < 1:
        raise DataError("n_pairs must be >= 1")
    anchor, _, positive = sample_positive_pairs(task, proxy, n_pairs, np.random.default_rng(seed))
    return float(np.mean(anchor == positive))


@dataclass
class DecompositionReport:
    L_un: float
    L_eq: float | None
    L_neq: float | None
    tau_coll: float
    residual: float | None
    n_pairs: int
    flags: list[str] = field(default_factory=list)


def decompose_loss(
    f: Callable[[np.ndarray], np.ndarray],
    task: LatentTask,
    proxy: ClinicalProxy,
    n_pairs: int,
    temperature: float = 0.07,
    seed: int = 0,
    n_negatives: int = 4,
) -> DecompositionReport:
    """Split the mean InfoNCE loss by whether each positive pair collides.

    Each sample is (anchor, positive, ``n_negatives`` negatives): the positive
    matches the anchor's pseudo-label, negatives come from the marginal. The
    loss per sample is ``-log(e^{s+} / (e^{s+} + sum e^{s-}))`` with
    ``s = f(x) . f(x') / temperature``.
    """
    if n_pairs < 1:
        raise DataError("n_pairs must be >= 1")
    if not temperature > 0:
        raise DataError("temperature must be > 0")
    rng = np.random.default_rng(seed)
    anchor_c, _, pos_c = sample_positive_pairs(task, proxy, n_pairs, rng)
    neg_c = rng.choice(task.K, size=(n_pairs, n_negatives), p=task.rho)
    fa = f(task.draw(anchor_c, rng))
    fp = f(task.draw(pos_c, rng))
    fn = f(task.draw(neg_c.reshape(-1), rng)).reshape(n_pairs, n_negatives, -1)
    s_pos = np.sum(fa * fp, axis=1) / temperature
    s_neg = np.einsum("nd,nkd->nk", fa, fn) / temperature
    all_s = np.concatenate([s_pos[:, None], s_neg], axis=1)
    top = all_s.max(axis=1)
    loss = -(s_pos - top - np.log(np.exp(all_s - top[:, None]).sum(axis=1)))

    same = anchor_c == pos_c
    n_eq = int(same.sum())
    tau_coll = n_eq / n_pairs
    L_un = float(loss.mean())
    flags = []
    L_eq = float(loss[same].mean()) if n_eq else None
    L_neq = float(loss[~same].mean()) if n_eq < n_pairs else None
    if L_eq is None:
        flags.append("no colliding pairs: L_eq undefined")
    if L_neq is None:
        flags.append("no non-colliding pairs: L_neq undefined")
    residual = None
    if L_eq is not None and L_neq is not None:
        residual = abs(L_un - ((1.0 - tau_coll) * L_neq + tau_coll * L_eq))
    return DecompositionReport(L_un, L_eq, L_neq, tau_coll, residual, n_pairs, flags)


def linear_unit_map(W: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    def f(x):
        y = x @ W
        return y / np.linalg.norm(y, axis=1, keepdims=True)

    return f


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class TaskConfig:
    K: int = 4
    m: int = 32
    sigma: float = 0.5
    prior: tuple[float, ...] | None = (0.4, 0.3, 0.2, 0.1)


@dataclass(frozen=True)
class SweepPipeline:
    n_pretrain: int = 2000
    n_probe: int = 200
    n_test: int = 1000
    n_pairs: int = 20000
    hidden: tuple[int, ...] = (64,)
    rep_dim: int = 16
    pretrain: HyperParams = HyperParams(batch_size=128, epochs=10)
    probe: HyperParams = HyperParams(batch_size=32, epochs=25, lr_probe=0.01)


SWEEP_COLUMNS = ("eps", "kl_marginal", "tau_coll", "probe_accuracy", "seed")


def run_proxy_cell(eps: float, task_cfg: TaskConfig, pipe: SweepPipeline, seed: int) -> dict:
    """One sweep cell: pretrain on pseudo-labels at corruption ``eps``, probe on true classes."""
    task = sample_latent_task(task_cfg.K, task_cfg.prior, task_cfg.m, task_cfg.sigma, seed)
    proxy = make_clinical_proxy(task, eps)
    data_rng = np.random.default_rng([seed, 1])
    x_pre, c_pre = task.sample(pipe.n_pretrain, data_rng)
    x_probe, c_probe = task.sample(pipe.n_probe, data_rng)
    x_test, c_test = task.sample(pipe.n_test, data_rng)
    # corruption draws use their own stream so the data is identical across eps
    label_rng = np.random.default_rng([seed, 2])
    pseudo = _row_choice(np.cumsum(proxy.q, axis=1)[c_pre], label_rng)

    config = EncoderConfig(task.m, pipe.hidden, pipe.rep_dim)
    spec = LossSpec((("proxy", 1.0),), pipe.pretrain.temperature)
    enc = pretrain_arrays(x_pre, {"proxy": pseudo}, spec, pipe.pretrain, config, seed)

    feats = enc.represent(x_probe)
    W, b, _ = fit_linear_head(
        feats, lambda lg, idx: cross_entropy(lg, c_probe[idx]), task.K, pipe.probe, pipe.probe.lr_probe, seed
    )
    pred = np.argmax(enc.represent(x_test) @ W + b, axis=1)
    return {
        "eps": float(eps),
        "kl_marginal": kl_divergence(proxy.rho_clin, task.rho),
        "tau_coll": collision_rate(task, proxy, pipe.n_pairs, seed),
        "probe_accuracy": float(np.mean(pred == c_test)),
        "seed": int(seed),
    }


def run_proxy_sweep(
    eps_levels: Sequence[float],
    task_cfg: TaskConfig = TaskConfig(),
    pipe: SweepPipeline = SweepPipeline(),
    seeds: Sequence[int] = (1, 2, 3),
) -> list[dict]:
    if len(eps_levels) < 3:
        raise DataError("a proxy sweep needs at least 3 corruption levels")
    return [run_proxy_cell(eps, task_cfg, pipe, seed) for eps in eps_levels for seed in seeds]


def summarize_sweep(rows: Sequence[dict]) -> list[dict]:
    """Average each column over seeds, per corruption level."""
    out = []
    for eps in sorted({r["eps"] for r in rows}):
        cell = [r for r in rows if r["eps"] == eps]
        row = {k: float(np.mean([r[k] for r in cell])) for k in ("kl_marginal", "tau_coll", "probe_accuracy")}
        out.append({"eps": eps, **row, "n_seeds": len(cell)})
    return out


def write_sweep_csv(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r["eps"])), repr(float(r["kl_marginal"])), repr(float(r["tau_coll"])),
                        repr(float(r["probe_accuracy"])), int(r["seed"])])
    return path
