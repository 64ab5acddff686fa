"""
Looking inside joint attention
==============================

Image and text tokens share one attention matrix.  Here we pull out its four
quadrants for one block, check that image rows are normalised across both
image and text keys, and print a coarse heatmap of where one word attends.
"""

import numpy as np

from mmdit_edit import atlas
from mmdit_edit.flow import TimeGrid
from mmdit_edit.model import HookSet, ModelConfig, ToyMMDiT

model = ToyMMDiT(ModelConfig())
cfg = model.cfg
prompt = model.encode("a red fox in the snow")
x = np.random.default_rng(0).standard_normal((cfg.n_image, cfg.width))

# %%
# Capture every block at the middle of the schedule.

t = TimeGrid.uniform(4).knots[2]
_, acts = model.model_velocity(x, t, prompt, HookSet(capture=frozenset(range(cfg.depth))))
quads = atlas.decompose(acts[4].weights, cfg.concat_order, cfg.n_image, cfg.text_len)
print("I2I", quads.i2i.shape, "T2I", quads.t2i.shape, "I2T", quads.i2t.shape, "T2T", quads.t2t.shape)

# %%
# An image query splits its mass between image keys and text keys.

row_mass = quads.i2i.sum(axis=-1) + quads.t2i.sum(axis=-1)
print("max |row mass - 1| =", np.abs(row_mass - 1).max())
print("share of image-row mass on text keys: %.3f" % quads.t2i.sum(axis=-1).mean())

# %%
# Token map of "fox" (token 2), averaged over heads, as characters.

fox = np.mean([atlas.token_map(quads.head(h), 2, cfg.image_grid) for h in range(cfg.heads)], axis=0)
shades = " .:-=+*#%@"
scaled = (fox - fox.min()) / (np.ptp(fox) or 1.0)
for row in scaled:
    print("".join(shades[int(v * (len(shades) - 1))] * 2 for v in row))

# %%
# Diagonal share of T2T mass.  Uniform attention over 16 text keys would
# give 1/16; random toy weights sit close to that.

for b, act in enumerate(acts):
    q = atlas.decompose(act.weights, cfg.concat_order, cfg.n_image, cfg.text_len)
    print(f"block {b}: T2T diagonal share per head", np.round(atlas.t2t_diagonality(q), 3))
