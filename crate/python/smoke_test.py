"""Smoke test for the compiled `patholab` extension module.

Build and run from the repository root:

    cargo build --release -p patholab-py --features extension-module
    cp target/release/libpatholab.so python/patholab.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import patholab  # noqa: E402


def main():
    assert patholab.iou(((0, 0), (2, 2)), ((1, 1), (2, 2))) == 1 / 7
    assert patholab.holm_adjust([0.01, 0.04]) == [0.02, 0.04]
    assert abs(patholab.minimax_value([0.5] * 8, [0.5] * 8) + 2 * math.log(2)) < 1e-12
    assert patholab.cpm_from_counts(10, 8, [(1, 1), (2, 2), (4, 3), (8, 4), (16, 5), (32, 6), (64, 7)]) == 0.4
    assert patholab.mcgan_objective(0.25, 0.5, 0.125) - patholab.mcgan_objective(0.25, 0.5, 0.125, enable_l1=False) == 12.5

    pairs = (
        [("real", "real")] * 73
        + [("real", "synthetic")] * 27
        + [("synthetic", "real")] * 14
        + [("synthetic", "synthetic")] * 86
    )
    report = patholab.vtt_score(pairs)
    assert report["accuracy"] == 79.5, report

    (result,) = patholab.mcnemar_holm([(30, 10, 2, 8)])
    assert abs(result["p_raw"] - 0.0209) < 1e-3, result

    scenes = patholab.generate_phantoms(seed=7, count=8, size=16)
    assert len(scenes) == 8 and len(scenes[0]["image"]) == 16
    mask = patholab.bbox_mask(scenes[0]["boxes"], 16, 16)
    assert sum(map(sum, mask)) > 0

    trainer = patholab.Trainer(
        [s["image"] for s in scenes], steps_per_stage=2, boxes=[s["boxes"] for s in scenes], seed=1, batch=2
    )
    losses = trainer.train()
    assert len(losses) == trainer.total_steps
    assert all(math.isfinite(l["critic"]) and math.isfinite(l["generator"]) for l in losses)
    (img,) = trainer.generate(1, boxes=[scenes[0]["boxes"]])
    assert all(-1.0 <= v <= 1.0 for row in img for v in row)

    emb = patholab.tsne([row for s in scenes for row in s["image"][:4]], perplexity=5.0, iterations=300, seed=0)
    assert emb["kl_final"] < emb["kl_initial"]
    assert emb["calibration_error"] < 1e-4

    print("patholab smoke test passed")


if __name__ == "__main__":
    main()
