"""Regenerate the golden JSON files from the loop oracles in ``tests/oracles.py``.

Run from the repository root: ``python3 tests/golden/generate.py``. Inputs
come from fixed seeds; outputs come only from the oracles.
"""
from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402
from golden_inputs import GOLDEN_CONFIG, golden_inputs  # noqa: E402


def main() -> None:
    inp = golden_inputs()
    cfg = GOLDEN_CONFIG.as_dict()
    t = inp["weights"].tensors
    image, masks = inp["image"], inp["masks"]

    cls0, _, _ = oracles.forward(image, t, cfg)
    cls_m, feats_m, _ = oracles.forward(image, t, cfg, masks)
    cls_r, feats_r, refined = oracles.forward(image, t, cfg, masks, rma=inp["rma"].tensors, rma_layers=(1, 2))

    table = inp["table"]
    scores = []
    for mk in inp["baseline_masks"]:
        feat, _, _ = oracles.forward(mk[None] * image, t, cfg)
        logits = [100.0 * sum(feat[c] * row[c] for c in range(len(feat))) for row in table]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        scores.append([e / sum(ex) for e in ex])

    out = {
        "class_feature": cls0.tolist(),
        "mask_tokens": {"class_feature": cls_m.tolist(), "mask_features": feats_m.tolist()},
        "rma": {
            "class_feature": cls_r.tolist(),
            "mask_features": feats_r.tolist(),
            "refined_masks": refined.tolist(),
        },
        "baseline_scores": scores,
    }
    (HERE / "toy_forward.json").write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
