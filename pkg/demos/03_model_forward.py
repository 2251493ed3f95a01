"""Run an untrained model and inspect its response maps.

The forward pass projects pixels and phrases into a joint space, scores
every pixel against every phrase, then refines the phrase embeddings for
a few rounds by attending over each phrase's most compatible pixels.
One response map per phrase comes out of every stage.
"""

import numpy as np

from pixelphrase import (
    ModelConfig,
    ModelParams,
    SceneConfig,
    Tensor,
    forward,
    generate_scene,
)

SHADES = " .:-=+*#%@"


def render_probability(grid):
    idx = np.clip((grid * len(SHADES)).astype(int), 0, len(SHADES) - 1)
    return "\n".join("".join(SHADES[v] for v in row) for row in idx)


scene_cfg = SceneConfig(height=12, width=24, num_phrases=5, num_classes=4,
                        visual_channels=16, phrase_channels=16,
                        noise_sigma=0.1, seed=11)
sample = generate_scene(scene_cfg, index=0)

model_cfg = ModelConfig(channels=16, heads=4, compatible_pixels=32,
                        rounds=2, visual_channels=16, phrase_channels=16,
                        norm_groups=4)
params = ModelParams.initialize(model_cfg, seed=0)
n_params = sum(t.data.size for _, t in params.named_parameters())
print(f"model: {model_cfg.rounds} refinement rounds, "
      f"{model_cfg.channels} joint channels, {n_params} parameters")

maps = forward(params, Tensor(sample.visual), Tensor(sample.phrases))
print(f"\nforward returns {len(maps)} response maps "
      f"(initial matching + one per round):")
for i, m in enumerate(maps):
    stage = "initial" if i == 0 else f"round {i}"
    print(f"  {stage:>8}: shape {m.data.shape}, "
          f"values in [{m.data.min():.3f}, {m.data.max():.3f}]")

pick = next(a["id"] for a in sample.annotations if a["grounded"])
print(f"\n=== phrase {pick}: target vs untrained responses ===")
print("target:")
print(render_probability(sample.truth.masks[pick].astype(float)))
print("\nfinal-round response map (untrained, so still noise):")
print(render_probability(maps[-1].data[pick]))

probs = maps[-1].data
print(f"\nall probabilities strictly inside (0, 1): "
      f"{bool((probs > 0).all() and (probs < 1).all())}")
