"""Regenerate the frozen loss fixtures from the scalar oracles.

Run from the repository root: ``python3 tests/fixtures/generate.py``.
Expected gradients are central differences of the scalar oracle.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402


def _unit(rng, n, d):
    return oracles.unit_rows(rng.standard_normal((n, d)))


def contrastive_fixture(name, z, labels_list, weights, tau):
    """``labels_list`` holds one 2N label vector per term; ``None`` means the twin layout."""

    def value(flat):
        zz = flat.reshape(z.shape)
        total = 0.0
        for labels, w in zip(labels_list, weights):
            if labels is None:
                total += w * oracles.info_nce_scalar(zz.tolist(), tau)
            else:
                total += w * oracles.supcon_scalar(zz.tolist(), labels, tau)
        return total

    return {
        "name": name,
        "kind": "contrastive",
        "z": z.tolist(),
        "labels": [None if l is None else list(l) for l in labels_list],
        "weights": list(weights),
        "tau": tau,
        "expected_value": value(z.reshape(-1)),
        "expected_grad": oracles.central_difference(value, z.reshape(-1)).reshape(z.shape).tolist(),
    }


def main() -> None:
    rng = np.random.default_rng(20240611)
    fixtures = [
        contrastive_fixture("info_nce_6x3", _unit(rng, 6, 3), [None], [1.0], 0.07),
        contrastive_fixture("supcon_557", _unit(rng, 6, 3), [[5, 5, 7, 5, 5, 7]], [1.0], 0.07),
        contrastive_fixture("supcon_lonely_anchors", _unit(rng, 8, 4), [[1, 2, 3, 1, 4, 5, 6, 7]], [1.0], 0.1),
        contrastive_fixture(
            "combined_bcva_cst", _unit(rng, 6, 3), [[60, 60, 72, 60, 60, 72], [300, 410, 410, 300, 410, 410]],
            [1.0, 1.0], 0.07,
        ),
        contrastive_fixture(
            "combined_weighted", _unit(rng, 8, 4), [[1, 1, 2, 3, 1, 1, 2, 3], None], [0.5, 2.0], 0.5,
        ),
    ]
    logits = rng.normal(size=(3, 3))
    labels = [0, 2, 1]
    fixtures.append({
        "name": "cross_entropy_3x3", "kind": "cross_entropy", "logits": logits.tolist(), "labels": labels,
        "expected_value": oracles.cross_entropy_scalar(logits.tolist(), labels),
        "expected_grad": oracles.central_difference(
            lambda f: oracles.cross_entropy_scalar(f.reshape(3, 3).tolist(), labels), logits.reshape(-1)
        ).reshape(3, 3).tolist(),
    })
    logits = rng.normal(size=(2, 5)) * 2
    targets = [[1, 0, 0, 1, 1], [0, 0, 1, 0, 1]]
    fixtures.append({
        "name": "bce_2x5", "kind": "bce", "logits": logits.tolist(), "targets": targets,
        "expected_value": oracles.bce_scalar(logits.tolist(), targets),
        "expected_grad": oracles.central_difference(
            lambda f: oracles.bce_scalar(f.reshape(2, 5).tolist(), targets), logits.reshape(-1)
        ).reshape(2, 5).tolist(),
    })
    student = rng.normal(size=(2, 3))
    teacher = rng.normal(size=(2, 3))
    fixtures.append({
        "name": "distill_2x3_T2", "kind": "distillation", "student": student.tolist(), "teacher": teacher.tolist(),
        "T": 2.0,
        "expected_value": oracles.distillation_scalar(student.tolist(), teacher.tolist(), 2.0),
        "expected_grad": oracles.central_difference(
            lambda f: oracles.distillation_scalar(f.reshape(2, 3).tolist(), teacher.tolist(), 2.0),
            student.reshape(-1),
        ).reshape(2, 3).tolist(),
    })
    out = HERE / "losses.json"
    out.write_text(json.dumps(fixtures, indent=1) + "\n")
    print(f"wrote {len(fixtures)} fixtures to {out}")


if __name__ == "__main__":
    main()
