"""Minimal numpy MLP, momentum SGD and the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from clincon.errors import DataError

DTYPE = np.float32
CHECKPOINT_MAGIC = b"CLINCON1"


class MLP:
    """Stack of affine layers with ReLU between them.

    ``final_relu`` also applies ReLU to the last layer's output.
    Parameters are stored as ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes: Sequence[int], final_relu: bool = False, rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise DataError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = [int(s) for s in sizes]
        self.final_relu = final_relu
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            # same bound as torch.nn.Linear's default init
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE))
            self.params.append(rng.uniform(-bound, bound, size=(fan_out,)).astype(DTYPE))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def decay_mask(self) -> list[bool]:
        """Weight decay applies to weight matrices only."""
        return [i % 2 == 0 for i in range(len(self.params))]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        h = x
        for layer in range(self.n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            pre = h @ W + b
            relu = layer < self.n_layers - 1 or self.final_relu
            cache.append((h, pre, relu))
            h = np.maximum(pre, 0) if relu else pre
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for layer in reversed(range(self.n_layers)):
            h, pre, relu = cache[layer]
            if relu:
                g = g * (pre > 0)
            W = self.params[2 * layer]
            grads[2 * layer] = h.T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ W.T
        return grads, g

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = list(self.sizes)
        other.final_relu = self.final_relu
        other.params = [p.copy() for p in self.params]
        return other


class SGD:
    """SGD with momentum: ``v <- m v + g + wd theta``; ``theta <- theta - lr v``."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_mask: Sequence[bool] | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(params)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g, v, decay in zip(self.params, grads, self.velocity, self.decay_mask):
            d = g.astype(p.dtype, copy=False)
            if decay and self.weight_decay:
                d = d + self.weight_decay * p
            v *= self.momentum
            v += d
            p -= self.lr * v


def params_checksum(params: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write ``MAGIC | u64 header length | JSON header | float32 blob``.

    The header gains an ``arrays`` table (name, shape, offset) and a sha256
    of the blob. Returns the blob checksum.
    """
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    full = dict(header)
    full["arrays"] = table
    full["blob_sha256"] = digest
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    return digest


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a clincon checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    blob = raw[16 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise DataError(f"{path}: parameter blob checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = arr.astype(DTYPE)
    return header, arrays
