# %% [markdown]
# # Synthetic shapes, silhouettes and reconstruction metrics
#
# Build a few primitives, look at them from two sides, and score a
# deliberately imperfect prediction with IoU and surface F-score.

# %%
import numpy as np

from volt.data import ShapeSpec, build_dataset, generate_shape, render_silhouette
from volt.metrics import grid_fscore, iou

# %%
ell = generate_shape(ShapeSpec("ell", {"lo": [2, 2, 2], "hi": [12, 10, 14], "thickness": 3}), 16)
print("occupied voxels:", int(ell.sum()))

front, back = render_silhouette(ell, 0.0), render_silhouette(ell, np.pi)
for row_a, row_b in zip(front[::-2], back[::-2]):  # top row first
    print("".join(".#"[v] for v in row_a), "  ", "".join(".#"[v] for v in row_b))

# %% [markdown]
# Viewed from the opposite side the silhouette is a left-right mirror image.

# %%
print("mirror:", np.array_equal(back, front[:, ::-1]))

# %% [markdown]
# Shrink the shape by one voxel layer and compare.

# %%
eroded = ell.copy()
eroded[:, :, -3:] = 0
print("IoU      ", round(iou(eroded, ell), 4))
f, p, r = grid_fscore(eroded, ell)
print("F/P/R    ", round(f, 4), round(p, 4), round(r, 4))

# %% [markdown]
# A dataset bundles shapes, 24 evenly spaced views and frozen view embeddings.

# %%
ds = build_dataset(6, 24, 16, seed=0)
print([s.kind for s in ds.samples])
print("views array:", ds.views_array(8).shape, "grids:", ds.grids_array().shape)
