"""Train on five scenes until the model pins every phrase to its mask.

Watches the loss fall, then renders one phrase's response map after
training next to its target, and finishes with the per-split recall
table on the training scenes.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from pixelphrase import (
    ModelConfig,
    SceneConfig,
    TrainConfig,
    evaluate,
    generate_scene,
    load_checkpoint,
    forward,
    Tensor,
    train,
)

SHADES = " .:-=+*#%@"


def render_probability(grid):
    idx = np.clip((grid * len(SHADES)).astype(int), 0, len(SHADES) - 1)
    return "\n".join("".join(SHADES[v] for v in row) for row in idx)


scene_cfg = SceneConfig(height=12, width=24, num_phrases=5, num_classes=4,
                        visual_channels=16, phrase_channels=16,
                        noise_sigma=0.1, seed=5)
dataset = [generate_scene(scene_cfg, index=i) for i in range(5)]

cfg = TrainConfig(
    lr=3e-3, epochs=100000, batch_size=5, seed=0, max_steps=400,
    decay_start=100000, eval_every=100000,
    model=ModelConfig(channels=16, heads=4, compatible_pixels=32, rounds=2,
                      visual_channels=16, phrase_channels=16, norm_groups=4),
)

out_dir = Path(tempfile.mkdtemp(prefix="overfit_"))
print(f"training 400 steps on 5 scenes (artifacts in {out_dir})")
result = train(cfg, dataset, out_dir)

records = [json.loads(line) for line in open(result.log_path)]
losses = [r["loss_total"] for r in records if "loss_total" in r]
print("\nstep   loss")
for step in (1, 50, 100, 200, 300, 400):
    print(f"{step:>4}   {losses[step - 1]:.4f}")

params, _ = load_checkpoint(result.final_path)
sample = dataset[0]
pick = next(a["id"] for a in sample.annotations if a["grounded"])
maps = forward(params, Tensor(sample.visual), Tensor(sample.phrases))
print(f"\n=== phrase {pick} after training ===")
print("target:")
print(render_probability(sample.truth.masks[pick].astype(float)))
print("response:")
print(render_probability(maps[-1].data[pick]))

report = evaluate(params, dataset)
print("\n=== recall on the training scenes ===")
for name in ("overall", "things", "stuff", "singulars", "plurals"):
    stats = getattr(report, name)
    ar = "  n/a" if stats.ar is None else f"{stats.ar:.3f}"
    print(f"{name:>10}: AR {ar}  ({stats.count} phrases)")
