"""Generate a synthetic panoptic scene and look inside it.

Every scene is a grid of class-coded feature vectors: stuff classes as
background bands, thing classes as rectangles or ellipses pasted on top,
each pixel owned by exactly one instance.  Phrases reference classes
(some plural, some deliberately ungrounded) and come with target masks.
"""

import numpy as np

from pixelphrase import SceneConfig, generate_scene

GLYPHS = "abcdefghijklmnopqrstuvwxyz"


def render(grid):
    return "\n".join("".join(GLYPHS[v % len(GLYPHS)] for v in row)
                     for row in grid)


def render_mask(mask):
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


cfg = SceneConfig(height=12, width=24, num_phrases=6, num_classes=5,
                  visual_channels=16, phrase_channels=16, noise_sigma=0.1,
                  seed=42)
sample = generate_scene(cfg, index=0)

print("=== instance grid (one letter per instance) ===")
print(render(sample.segments))
print(f"\ninstance -> class map: {sample.instance_classes}")

print("\n=== phrase annotations ===")
print(f"{'id':>3} {'class':>5} {'grounded':>8} {'plurality':>9} "
      f"{'category':>8} {'span':>8} {'area':>5}")
for ann in sample.annotations:
    area = int(sample.truth.masks[ann["id"]].sum())
    row = {k: "-" if ann[k] is None else ann[k]
           for k in ("class", "plurality", "category")}
    print(f"{ann['id']:>3} {row['class']:>5} {str(ann['grounded']):>8} "
          f"{row['plurality']:>9} {row['category']:>8} "
          f"{str(ann['word_span']):>8} {area:>5}")

grounded = [a for a in sample.annotations if a["grounded"]]
pick = grounded[0]
print(f"\n=== target mask for phrase {pick['id']} "
      f"(class {pick['class']}, {pick['plurality']}) ===")
print(render_mask(sample.truth.masks[pick["id"]]))

print("\n=== feature geometry ===")
print(f"visual features: {sample.visual.shape} "
      f"(grid x {cfg.visual_channels} channels)")
print(f"phrase embeddings: {sample.phrases.shape}")
fg = sample.visual[sample.segments == 1].mean(axis=0)
bg = sample.visual[sample.segments == 0].mean(axis=0)
print(f"mean feature distance between two instances: "
      f"{np.linalg.norm(fg - bg):.3f} (codebook rows are orthonormal)")

again = generate_scene(cfg, index=0)
print("\nregenerating with the same seed is bit-identical:",
      np.array_equal(sample.visual, again.visual)
      and np.array_equal(sample.truth.masks, again.truth.masks))
